//! Central finite-difference certification of hand-derived gradients.

use std::fmt;

use crate::linalg::Params;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on an absolute scale.
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub block: String,
    pub checked: usize,
    /// Coordinates skipped because the loss is not smooth within ±step
    /// (an activation kink or the signed-sqrt singularity was crossed).
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.3e}\t{:.1e}\t{}\t{}\t{}",
            self.block,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.skipped,
            self.worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic` (a gradient with the same layout as `params`) against
/// central differences of `loss`. At most `max_coords` coordinates are
/// probed, evenly strided across the flattened parameter vector.
pub fn check<P, F>(
    block: &str,
    params: &P,
    analytic: &P,
    loss: F,
    tolerance: f64,
    max_coords: usize,
) -> GradReport
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    let names = coordinate_names(params);
    let base = params.flatten();
    let grad = analytic.flatten();
    assert_eq!(base.len(), grad.len(), "gradient layout mismatch");
    let n = base.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);

    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut eval = |i: usize, v: f64, flat: &mut Vec<f64>| {
        flat[i] = v;
        probe.assign_flat(flat);
        let l = loss(&probe);
        flat[i] = base[i];
        l
    };

    let mut report = GradReport {
        block: block.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance,
    };
    for i in (0..n).step_by(stride) {
        let x = base[i];
        let fd = (eval(i, x + STEP, &mut flat) - eval(i, x - STEP, &mut flat)) / (2.0 * STEP);
        let half = STEP / 2.0;
        let fd_half = (eval(i, x + half, &mut flat) - eval(i, x - half, &mut flat)) / (2.0 * half);
        // On a smooth function the two estimates agree to O(step²); a large
        // disagreement means a kink lies inside the stencil.
        if relative_error(fd, fd_half) > tolerance.max(1e-6) * 0.5 && relative_error(grad[i], fd) > tolerance {
            report.skipped += 1;
            continue;
        }
        // Richardson extrapolation cancels the O(step²) truncation term,
        // which matters near the strongly curved signed square root.
        let numeric = (4.0 * fd_half - fd) / 3.0;
        let err = relative_error(grad[i], numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = names[i].clone();
        }
    }
    report
}

fn coordinate_names<P: Params>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |name, _, d| {
        for k in 0..d.len() {
            out.push(format!("{name}[{k}]"));
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{visit_vec, Params};

    #[derive(Clone)]
    struct V(Vec<f64>);

    impl Params for V {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
            visit_vec(prefix, "v", &self.0, f);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut [f64])) {
            f("v".into(), &mut self.0);
        }
    }

    fn quartic(p: &V) -> f64 {
        p.0.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x.powi(4) + x.sin()).sum()
    }

    fn quartic_grad(p: &V) -> V {
        V(p.0
            .iter()
            .enumerate()
            .map(|(i, x)| 4.0 * (i as f64 + 1.0) * x.powi(3) + x.cos())
            .collect())
    }

    #[test]
    fn correct_gradient_passes() {
        let p = V(vec![0.3, -1.2, 0.7, 2.0]);
        let r = check("quartic", &p, &quartic_grad(&p), quartic, 1e-3, 100);
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn linear_is_exact() {
        let p = V(vec![0.5, -0.25, 3.0]);
        let g = V(vec![1.5, -2.0, 0.125]);
        let r = check(
            "linear",
            &p,
            &g,
            |q| 1.5 * q.0[0] - 2.0 * q.0[1] + 0.125 * q.0[2] + 7.0,
            1e-6,
            100,
        );
        assert!(r.passed(), "{r}");
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let p = V(vec![0.3, -1.2, 0.7]);
        let mut g = quartic_grad(&p);
        g.0.iter_mut().for_each(|v| *v *= 1.1);
        let r = check("quartic", &p, &g, quartic, 1e-3, 100);
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.1 / 1.1).abs() < 1e-3);
    }

    #[test]
    fn kink_is_skipped_not_failed() {
        // |x| at x = 1e-5 is inside the stencil.
        let p = V(vec![1e-5, 1.0]);
        let g = V(vec![1.0, 1.0]);
        let r = check("abs", &p, &g, |q| q.0[0].abs() + q.0[1], 1e-3, 100);
        assert_eq!(r.skipped, 1);
        assert!(r.passed(), "{r}");
    }
}
