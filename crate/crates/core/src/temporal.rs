//! Recency-weighted fusion of per-window (local) entity embeddings with the
//! global embedding.

use crate::error::{Error, Result};
use crate::linalg::{
    add_assign, axpy, dot, join, leaky_relu, leaky_relu_grad, softmax, softmax_backward,
    visit_mat, visit_vec, Mat, Params,
};
use rand::Rng;

pub const DEFAULT_BETA: f64 = 0.1;

/// Scale of the random part of the `W_temp` initialization.
const RESIDUAL_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams {
    pub beta: f64,
    /// `de × 2de`, acting on `[e_local ; e_global]`.
    pub w_temp: Mat,
    pub b_temp: Vec<f64>,
}

impl TemporalParams {
    pub fn init<R: Rng + ?Sized>(de: usize, rng: &mut R) -> Self {
        // Starts near the identity on the global half, so the fused rep is
        // the global one plus a small learned local correction. A plain
        // Xavier start scrambles the global signal and trains worse.
        let mut w_temp = Mat::xavier(de, 2 * de, rng);
        w_temp.data.iter_mut().for_each(|w| *w *= RESIDUAL_SCALE);
        for i in 0..de {
            let v = w_temp.get(i, de + i) + 1.0;
            w_temp.set(i, de + i, v);
        }
        TemporalParams {
            beta: DEFAULT_BETA,
            w_temp,
            b_temp: vec![0.0; de],
        }
    }

    pub fn zeros_like(&self) -> Self {
        TemporalParams {
            beta: 0.0,
            w_temp: Mat::zeros(self.w_temp.rows, self.w_temp.cols),
            b_temp: vec![0.0; self.b_temp.len()],
        }
    }
}

impl Params for TemporalParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(join(prefix, "beta"), vec![1], std::slice::from_ref(&self.beta));
        visit_mat(prefix, "w_temp", &self.w_temp, f);
        visit_vec(prefix, "b_temp", &self.b_temp, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "beta"), std::slice::from_mut(&mut self.beta));
        f(join(prefix, "w_temp"), &mut self.w_temp.data);
        f(join(prefix, "b_temp"), &mut self.b_temp);
    }
}

/// Normalized importance `exp(−β(m−k))` over the present windows (1-based
/// `k ≤ m`), in the order given.
pub fn window_weights(beta: f64, m: usize, present: &[usize]) -> Result<Vec<f64>> {
    if present.is_empty() {
        return Err(Error::Config("window weights need at least one present window".into()));
    }
    if let Some(&k) = present.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::OutOfRange {
            what: "window index (1-based)",
            index: k,
            len: m,
        });
    }
    Ok(softmax(&logits(beta, m, present)))
}

fn logits(beta: f64, m: usize, present: &[usize]) -> Vec<f64> {
    present.iter().map(|&k| -beta * (m - k) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    present: Vec<usize>,
    weights: Vec<f64>,
    concat: Vec<f64>,
    z: Vec<f64>,
}

/// Fuses local window embeddings (`(k, vector)` pairs, 1-based `k`) with the
/// global embedding. With no locals, `e_local` is the zero vector.
pub fn fuse_local_global(
    locals: &[(usize, &[f64])],
    global: &[f64],
    m: usize,
    params: &TemporalParams,
) -> Result<(Vec<f64>, FuseCache)> {
    let de = params.b_temp.len();
    if global.len() != de {
        return Err(Error::Dimension {
            expected: de,
            got: global.len(),
        });
    }
    if let Some((_, v)) = locals.iter().find(|(_, v)| v.len() != de) {
        return Err(Error::Dimension {
            expected: de,
            got: v.len(),
        });
    }
    let present: Vec<usize> = locals.iter().map(|(k, _)| *k).collect();
    let weights = if present.is_empty() {
        Vec::new()
    } else {
        window_weights(params.beta, m, &present)?
    };
    let mut concat = vec![0.0; 2 * de];
    for ((_, v), w) in locals.iter().zip(&weights) {
        axpy(*w, v, &mut concat[..de]);
    }
    concat[de..].copy_from_slice(global);
    let mut z = params.w_temp.matvec(&concat);
    add_assign(&mut z, &params.b_temp);
    let out = z.iter().map(|&v| leaky_relu(v)).collect();
    Ok((
        out,
        FuseCache {
            present,
            weights,
            concat,
            z,
        },
    ))
}

/// Gradients of one fusion: returns `(d_locals, d_global)` and accumulates
/// parameter gradients.
pub fn fuse_local_global_backward(
    locals: &[(usize, &[f64])],
    m: usize,
    cache: &FuseCache,
    d_out: &[f64],
    params: &TemporalParams,
    grads: &mut TemporalParams,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let de = params.b_temp.len();
    let dz: Vec<f64> = d_out
        .iter()
        .zip(&cache.z)
        .map(|(g, z)| g * leaky_relu_grad(*z))
        .collect();
    grads.w_temp.add_outer(&dz, &cache.concat);
    add_assign(&mut grads.b_temp, &dz);
    let d_concat = params.w_temp.matvec_t(&dz);
    let d_local = &d_concat[..de];
    let d_global = d_concat[de..].to_vec();
    let d_locals: Vec<Vec<f64>> = cache
        .weights
        .iter()
        .map(|w| d_local.iter().map(|g| g * w).collect())
        .collect();
    if !cache.present.is_empty() {
        let d_w: Vec<f64> = locals.iter().map(|(_, v)| dot(d_local, v)).collect();
        let d_logit = softmax_backward(&cache.weights, &d_w);
        for (k, dl) in cache.present.iter().zip(&d_logit) {
            grads.beta += dl * -((m - k) as f64);
        }
    }
    (d_locals, d_global)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(de: usize, w: Mat) -> TemporalParams {
        TemporalParams {
            beta: 0.0,
            w_temp: w,
            b_temp: vec![0.0; de],
        }
    }

    fn block(de: usize, left: bool, right: bool) -> Mat {
        let mut w = Mat::zeros(de, 2 * de);
        for i in 0..de {
            if left {
                w.set(i, i, 1.0);
            }
            if right {
                w.set(i, de + i, 1.0);
            }
        }
        w
    }

    #[test]
    fn weight_cases() {
        assert_eq!(window_weights(0.0, 4, &[1, 2, 3, 4]).unwrap(), vec![0.25; 4]);
        for beta in [-3.0, 0.0, 0.7, 50.0] {
            assert_eq!(window_weights(beta, 5, &[3]).unwrap(), vec![1.0]);
        }
        let w = window_weights(10.0, 2, &[1, 2]).unwrap();
        assert!((w[1] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((w[1] - 0.9999546).abs() < 1e-7);
        assert!(window_weights(1.0, 3, &[]).is_err());
        assert!(window_weights(1.0, 3, &[4]).is_err());
    }

    #[test]
    fn absent_everywhere_passes_global_through() {
        let p = params(2, block(2, false, true));
        let (out, _) = fuse_local_global(&[], &[0.5, -2.0], 3, &p).unwrap();
        assert_eq!(out, vec![0.5, -0.02]);
    }

    #[test]
    fn single_window_identity() {
        let p = params(2, block(2, true, false));
        let v = [0.3, 1.5];
        let (out, _) = fuse_local_global(&[(2, &v)], &[9.0, 9.0], 4, &p).unwrap();
        assert_eq!(out, v.to_vec());
    }

    #[test]
    fn uniform_two_windows() {
        let p = params(2, block(2, true, false));
        let u = [1.0, -4.0];
        let v = [3.0, 0.0];
        let (out, _) = fuse_local_global(&[(1, &u), (2, &v)], &[0.0, 0.0], 2, &p).unwrap();
        assert_eq!(out, vec![2.0, -0.02]);
    }

    #[test]
    fn dimension_mismatch() {
        let p = params(2, block(2, true, true));
        assert!(fuse_local_global(&[], &[1.0], 1, &p).is_err());
        assert!(fuse_local_global(&[(1, &[1.0][..])], &[1.0, 2.0], 1, &p).is_err());
    }

    #[test]
    fn recency_is_monotone_for_positive_beta() {
        let w = window_weights(0.3, 6, &[1, 2, 4, 6]).unwrap();
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }
}
