//! Cross-modal mixed-projection fusion.
//!
//! Every unordered pair of present representations `(x, y)` is fused by two
//! randomized degree-2 feature maps, combined with a signed square root:
//!
//! ```text
//! v'  = (1/√d) (W₁x) ⊙ (W₂y)                 random Maclaurin, W ∈ {±1}
//! v'' = IFFT(FFT(CS₁(x)) ⊙ FFT(CS₂(y)))       tensor sketch
//! v   = sign(v')√|v'| + sign(v'')√|v''|
//! ```
//!
//! The pair outputs are mixed with softmax attention over
//! `LeakyReLU(W_cross · v_z)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{
    axpy, dot, join, leaky_relu, leaky_relu_grad, softmax, softmax_backward, visit_vec, Mat,
    Params,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Dialogue,
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Patient,
    Doctor,
    Hospital,
    Disease,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Patient, Role::Doctor, Role::Hospital, Role::Disease];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RepKey {
    pub modality: Modality,
    pub role: Role,
}

impl RepKey {
    pub const fn new(modality: Modality, role: Role) -> Self {
        RepKey { modality, role }
    }
}

impl fmt::Display for RepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.modality {
            Modality::Dialogue => "dialogue",
            Modality::Online => "online",
            Modality::Offline => "offline",
        };
        let r = match self.role {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
            Role::Hospital => "hospital",
            Role::Disease => "disease",
        };
        write!(f, "{m}.{r}")
    }
}

impl FromStr for RepKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (m, r) = s.split_once('.').ok_or_else(|| format!("bad representation key `{s}`"))?;
        let modality = match m {
            "dialogue" => Modality::Dialogue,
            "online" => Modality::Online,
            "offline" => Modality::Offline,
            _ => return Err(format!("unknown modality `{m}`")),
        };
        let role = match r {
            "patient" => Role::Patient,
            "doctor" => Role::Doctor,
            "hospital" => Role::Hospital,
            "disease" => Role::Disease,
            _ => return Err(format!("unknown role `{r}`")),
        };
        if modality == Modality::Dialogue && !matches!(role, Role::Patient | Role::Doctor) {
            return Err(format!("dialogue has no `{r}` role"));
        }
        Ok(RepKey { modality, role })
    }
}

/// Dialogue × {patient, doctor} ∪ {online, offline} × all roles.
pub fn default_membership() -> Vec<RepKey> {
    let mut keys = vec![
        RepKey::new(Modality::Dialogue, Role::Patient),
        RepKey::new(Modality::Dialogue, Role::Doctor),
    ];
    for m in [Modality::Online, Modality::Offline] {
        for r in Role::ALL {
            keys.push(RepKey::new(m, r));
        }
    }
    keys
}

// ---------------------------------------------------------------------------
// Sketch primitives

/// `out[H(i)] += s(i) · x_i`
pub fn count_sketch(x: &[f64], hashes: &[usize], signs: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for ((xi, &h), s) in x.iter().zip(hashes).zip(signs) {
        out[h] += s * xi;
    }
    out
}

/// `(1/√d) (W₁x) ⊙ (W₂y)`
pub fn random_maclaurin(x: &[f64], y: &[f64], w1: &Mat, w2: &Mat) -> Vec<f64> {
    let d = w1.rows;
    let scale = 1.0 / (d as f64).sqrt();
    let px = w1.matvec(x);
    let py = w2.matvec(y);
    px.iter().zip(&py).map(|(a, b)| a * b * scale).collect()
}

#[inline]
pub fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

/// Derivative of the signed square root, defined as 0 at the origin.
#[inline]
pub fn signed_sqrt_grad(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        0.5 / v.abs().sqrt()
    }
}

pub fn signed_sqrt_combine(v1: &[f64], v2: &[f64]) -> Vec<f64> {
    v1.iter()
        .zip(v2)
        .map(|(a, b)| signed_sqrt(*a) + signed_sqrt(*b))
        .collect()
}

/// Cached forward/inverse FFT plans of one length.
#[derive(Clone)]
pub struct FftPair {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FftPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftPair").field("len", &self.len).finish()
    }
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftPair {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn real_inverse(&self, mut buf: Vec<Complex<f64>>) -> Vec<f64> {
        self.inverse.process(&mut buf);
        let n = self.len as f64;
        buf.into_iter().map(|c| c.re / n).collect()
    }

    /// `(a ⊛ b)[n] = Σ_k a[k] b[(n−k) mod d]`
    pub fn circular_convolution(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let fa = self.spectrum(a);
        let fb = self.spectrum(b);
        self.real_inverse(fa.iter().zip(&fb).map(|(x, y)| x * y).collect())
    }

    /// `(g ⋆ b)[k] = Σ_n g[n] b[(n−k) mod d]`, the adjoint of convolution
    /// by `b`.
    pub fn circular_correlation(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let fg = self.spectrum(g);
        let fb = self.spectrum(b);
        self.real_inverse(fg.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect())
    }
}

/// Randomized projections for one representation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSketch {
    pub d: usize,
    /// Rademacher matrices, `d × n_x` and `d × n_y`.
    pub w1: Mat,
    pub w2: Mat,
    pub h1: Vec<usize>,
    pub s1: Vec<f64>,
    pub h2: Vec<usize>,
    pub s2: Vec<f64>,
    /// Distinct buckets of `h1` and `h2`.
    b1: Vec<usize>,
    b2: Vec<usize>,
}

impl PairSketch {
    pub fn generate(seed: u64, nx: usize, ny: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rademacher = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let w1 = Mat {
            rows: d,
            cols: nx,
            data: rademacher(d * nx, &mut rng),
        };
        let w2 = Mat {
            rows: d,
            cols: ny,
            data: rademacher(d * ny, &mut rng),
        };
        let h1: Vec<usize> = (0..nx).map(|_| rng.random_range(0..d)).collect();
        let s1 = rademacher(nx, &mut rng);
        let h2: Vec<usize> = (0..ny).map(|_| rng.random_range(0..d)).collect();
        let s2 = rademacher(ny, &mut rng);
        PairSketch {
            d,
            w1,
            w2,
            b1: hit_buckets(&h1),
            b2: hit_buckets(&h2),
            h1,
            s1,
            h2,
            s2,
        }
    }
}

/// Tensor sketch of `(x, y)`: convolution of their count sketches, computed
/// in the frequency domain. ([`fuse_pair`] switches to a direct sum for
/// sparse sketches; the two agree up to round-off.)
pub fn tensor_sketch(x: &[f64], y: &[f64], sketch: &PairSketch, fft: &FftPair) -> Vec<f64> {
    let cx = count_sketch(x, &sketch.h1, &sketch.s1, sketch.d);
    let cy = count_sketch(y, &sketch.h2, &sketch.s2, sketch.d);
    fft_convolution(&cx, &cy, fft)
}

/// Distinct buckets a hash function maps into.
fn hit_buckets(hashes: &[usize]) -> Vec<usize> {
    let mut b = hashes.to_vec();
    b.sort_unstable();
    b.dedup();
    b
}

/// Whether the sparse direct convolution is cheaper than three FFTs.
fn direct_is_cheaper(bx: usize, by: usize, d: usize) -> bool {
    let log = (usize::BITS - d.leading_zeros()) as usize;
    bx * by <= 8 * d * log
}

/// Convolution of two count sketches.
///
/// Sketches of narrow inputs are sparse, and the direct sum over their hit
/// buckets is both cheaper and exact. Otherwise the FFT is used and its
/// round-off is flushed to zero: buckets that are exactly zero in exact
/// arithmetic come back as ~1e-17 noise, which the signed square root would
/// amplify into a spurious, non-smooth signal with an enormous derivative.
/// Every output satisfies `|ts[k]| ≤ ‖cx‖‖cy‖`, so anything below a relative
/// 1e-12 of that bound is indistinguishable from round-off.
fn sketch_convolution(cx: &[f64], cy: &[f64], sketch: &PairSketch, fft: &FftPair) -> Vec<f64> {
    let d = sketch.d;
    let (bx, by) = (&sketch.b1, &sketch.b2);
    if direct_is_cheaper(bx.len(), by.len(), d) {
        let mut ts = vec![0.0; d];
        for &a in bx {
            for &b in by {
                ts[(a + b) % d] += cx[a] * cy[b];
            }
        }
        return ts;
    }
    fft_convolution(cx, cy, fft)
}

fn fft_convolution(cx: &[f64], cy: &[f64], fft: &FftPair) -> Vec<f64> {
    let bound = dot(cx, cx).sqrt() * dot(cy, cy).sqrt();
    let mut ts = fft.circular_convolution(cx, cy);
    for v in &mut ts {
        if v.abs() <= 1e-12 * bound {
            *v = 0.0;
        }
    }
    ts
}

/// Adjoint of [`sketch_convolution`]: `(∂/∂cx, ∂/∂cy)` given `∂/∂ts`.
fn sketch_convolution_backward(
    dts: &[f64],
    cx: &[f64],
    cy: &[f64],
    sketch: &PairSketch,
    fft: &FftPair,
) -> (Vec<f64>, Vec<f64>) {
    let d = sketch.d;
    let (bx, by) = (&sketch.b1, &sketch.b2);
    if direct_is_cheaper(bx.len(), by.len(), d) {
        let (mut dcx, mut dcy) = (vec![0.0; d], vec![0.0; d]);
        for &a in bx {
            for &b in by {
                let g = dts[(a + b) % d];
                dcx[a] += g * cy[b];
                dcy[b] += g * cx[a];
            }
        }
        return (dcx, dcy);
    }
    (fft.circular_correlation(dts, cy), fft.circular_correlation(dts, cx))
}

/// Fusion of one pair, returning `v` and the intermediates.
pub fn fuse_pair(x: &[f64], y: &[f64], sketch: &PairSketch, fft: &FftPair) -> PairForward {
    let d = sketch.d;
    let scale = 1.0 / (d as f64).sqrt();
    let px = sketch.w1.matvec(x);
    let py = sketch.w2.matvec(y);
    let rm: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b * scale).collect();
    let cx = count_sketch(x, &sketch.h1, &sketch.s1, d);
    let cy = count_sketch(y, &sketch.h2, &sketch.s2, d);
    let ts = sketch_convolution(&cx, &cy, sketch, fft);
    let v = signed_sqrt_combine(&rm, &ts);
    PairForward {
        v,
        px,
        py,
        rm,
        cx,
        cy,
        ts,
    }
}

#[derive(Debug, Clone)]
pub struct PairForward {
    pub v: Vec<f64>,
    px: Vec<f64>,
    py: Vec<f64>,
    rm: Vec<f64>,
    cx: Vec<f64>,
    cy: Vec<f64>,
    ts: Vec<f64>,
}

/// Backward of [`fuse_pair`]; accumulates into `dx`, `dy`.
pub fn fuse_pair_backward(
    fwd: &PairForward,
    dv: &[f64],
    sketch: &PairSketch,
    fft: &FftPair,
    dx: &mut [f64],
    dy: &mut [f64],
) {
    let d = sketch.d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dpx = vec![0.0; d];
    let mut dpy = vec![0.0; d];
    let mut dts = vec![0.0; d];
    for k in 0..d {
        let drm = dv[k] * signed_sqrt_grad(fwd.rm[k]);
        dpx[k] = drm * fwd.py[k] * scale;
        dpy[k] = drm * fwd.px[k] * scale;
        dts[k] = dv[k] * signed_sqrt_grad(fwd.ts[k]);
    }
    sketch.w1.matvec_t_acc(&dpx, dx);
    sketch.w2.matvec_t_acc(&dpy, dy);
    let (dcx, dcy) = sketch_convolution_backward(&dts, &fwd.cx, &fwd.cy, sketch, fft);
    for (i, g) in dx.iter_mut().enumerate() {
        *g += sketch.s1[i] * dcx[sketch.h1[i]];
    }
    for (i, g) in dy.iter_mut().enumerate() {
        *g += sketch.s2[i] * dcy[sketch.h2[i]];
    }
}

// ---------------------------------------------------------------------------
// Sketch benchmark

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let norm = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Four unit vectors `(x, x′, y, y′)` of width `n`. The primed vectors are
/// the normalized sum of the unprimed one and an independent unit vector,
/// so `⟨x,x′⟩⟨y,y′⟩` sits well away from zero (≈ ½).
pub fn bench_vectors(n: usize, seed: u64) -> [Vec<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_unit(n, &mut rng);
    let y = random_unit(n, &mut rng);
    let mut partner = |v: &[f64]| {
        let e = random_unit(n, &mut rng);
        let s: Vec<f64> = v.iter().zip(&e).map(|(a, b)| a + b).collect();
        let norm = dot(&s, &s).sqrt();
        s.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let xp = partner(&x);
    let yp = partner(&y);
    [x, xp, y, yp]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    /// Mean over sketch seeds of the estimated `⟨x,x′⟩⟨y,y′⟩`.
    pub estimate: f64,
    pub exact: f64,
    pub seconds: f64,
}

impl BenchRow {
    pub fn relative_error(&self) -> f64 {
        (self.estimate - self.exact).abs() / self.exact.abs()
    }

    /// `method  n  d  seeds  estimate  exact  rel_err  seconds`
    pub fn row(&self, n: usize, d: usize, seeds: usize) -> String {
        format!(
            "{}\t{n}\t{d}\t{seeds}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            self.method,
            self.estimate,
            self.exact,
            self.relative_error(),
            self.seconds
        )
    }
}

/// Monte Carlo check of both feature maps: for sketch seeds `0..seeds`,
/// `⟨φ(x,y), φ(x′,y′)⟩` averages to `⟨x,x′⟩⟨y,y′⟩`.
pub fn sketch_bench(n: usize, d: usize, seeds: usize, data_seed: u64) -> Vec<BenchRow> {
    let [x, xp, y, yp] = bench_vectors(n, data_seed);
    let exact = dot(&x, &xp) * dot(&y, &yp);
    let fft = FftPair::new(d);
    let sketches: Vec<PairSketch> = (0..seeds as u64).map(|s| PairSketch::generate(s, n, n, d)).collect();
    let timed = |method: &'static str, f: &dyn Fn(&PairSketch) -> f64| {
        let start = std::time::Instant::now();
        let total: f64 = sketches.iter().map(f).sum();
        BenchRow {
            method,
            estimate: total / seeds.max(1) as f64,
            exact,
            seconds: start.elapsed().as_secs_f64(),
        }
    };
    vec![
        timed("tensor_sketch", &|s| dot(&tensor_sketch(&x, &y, s, &fft), &tensor_sketch(&xp, &yp, s, &fft))),
        timed("random_maclaurin", &|s| {
            dot(&random_maclaurin(&x, &y, &s.w1, &s.w2), &random_maclaurin(&xp, &yp, &s.w1, &s.w2))
        }),
    ]
}

// ---------------------------------------------------------------------------
// Attention mixing

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub w_cross: Vec<f64>,
}

impl CrossAttnParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d + 1) as f64).sqrt();
        CrossAttnParams {
            w_cross: crate::linalg::uniform_vec(d, bound, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        CrossAttnParams { w_cross: vec![0.0; d] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w_cross.len())
    }
}

impl Params for CrossAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        visit_vec(prefix, "w_cross", &self.w_cross, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "w_cross"), &mut self.w_cross);
    }
}

/// Softmax weights of `LeakyReLU(W_cross · v_z)` over the pair outputs.
pub fn fusion_weights(pair_outputs: &[&[f64]], attn: &CrossAttnParams) -> Vec<f64> {
    let logits: Vec<f64> = pair_outputs
        .iter()
        .map(|v| leaky_relu(dot(&attn.w_cross, v)))
        .collect();
    softmax(&logits)
}

fn mix_seed(master: u64, a: RepKey, b: RepKey, na: usize, nb: usize, d: usize) -> u64 {
    let tag = format!("{a}|{b}|{na}|{nb}|{d}");
    let mut h = master ^ 0x5851_f42d_4c95_7f2d;
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        h = h.rotate_left(13);
    }
    h
}

/// The fusion layer: fixed per-pair sketches for a key membership.
#[derive(Debug, Clone)]
pub struct CrossMpm {
    pub d: usize,
    pub master_seed: u64,
    dims: BTreeMap<RepKey, usize>,
    pairs: BTreeMap<(RepKey, RepKey), PairSketch>,
    fft: FftPair,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    keys: Vec<RepKey>,
    pairs: Vec<(usize, usize, PairForward)>,
    pre: Vec<f64>,
    alpha: Vec<f64>,
}

impl FusionCache {
    pub fn weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

impl CrossMpm {
    /// Builds sketches for every unordered pair of `members`, each with its
    /// input width. Seeds derive from `(master_seed, sorted pair)`.
    pub fn new(master_seed: u64, d: usize, members: &[(RepKey, usize)]) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("fusion dimension must be positive".into()));
        }
        let dims: BTreeMap<RepKey, usize> = members.iter().copied().collect();
        let keys: Vec<RepKey> = dims.keys().copied().collect();
        let mut pairs = BTreeMap::new();
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                let (a, b) = (keys[i], keys[j]);
                let (na, nb) = (dims[&a], dims[&b]);
                let seed = mix_seed(master_seed, a, b, na, nb, d);
                pairs.insert((a, b), PairSketch::generate(seed, na, nb, d));
            }
        }
        Ok(CrossMpm {
            d,
            master_seed,
            dims,
            pairs,
            fft: FftPair::new(d),
        })
    }

    pub fn is_member(&self, key: RepKey) -> bool {
        self.dims.contains_key(&key)
    }

    pub fn members(&self) -> impl Iterator<Item = RepKey> + '_ {
        self.dims.keys().copied()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_sketch(&self, a: RepKey, b: RepKey) -> Option<&PairSketch> {
        let k = if a <= b { (a, b) } else { (b, a) };
        self.pairs.get(&k)
    }

    pub fn fft(&self) -> &FftPair {
        &self.fft
    }

    /// Fuses the present representations. Keys are processed in sorted
    /// order, so the result does not depend on the order of `reps`.
    pub fn fuse_all(
        &self,
        reps: &[(RepKey, &[f64])],
        attn: &CrossAttnParams,
    ) -> Result<(Vec<f64>, FusionCache)> {
        if reps.len() < 2 {
            return Err(Error::DegenerateFusion(reps.len()));
        }
        if attn.w_cross.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: attn.w_cross.len(),
            });
        }
        let mut order: Vec<usize> = (0..reps.len()).collect();
        order.sort_by_key(|&i| reps[i].0);
        for w in order.windows(2) {
            if reps[w[0]].0 == reps[w[1]].0 {
                return Err(Error::Config(format!("duplicate representation {}", reps[w[0]].0)));
            }
        }
        for &(k, v) in reps {
            let want = *self
                .dims
                .get(&k)
                .ok_or_else(|| Error::Config(format!("representation {k} is not a fusion member")))?;
            if v.len() != want {
                return Err(Error::Dimension {
                    expected: want,
                    got: v.len(),
                });
            }
        }

        let mut pairs = Vec::with_capacity(order.len() * (order.len() - 1) / 2);
        for a in 0..order.len() {
            for b in a + 1..order.len() {
                let (i, j) = (order[a], order[b]);
                let sketch = &self.pairs[&(reps[i].0, reps[j].0)];
                pairs.push((i, j, fuse_pair(reps[i].1, reps[j].1, sketch, &self.fft)));
            }
        }
        let pre: Vec<f64> = pairs.iter().map(|(_, _, p)| dot(&attn.w_cross, &p.v)).collect();
        let logits: Vec<f64> = pre.iter().map(|&p| leaky_relu(p)).collect();
        let alpha = softmax(&logits);
        let mut mix = vec![0.0; self.d];
        for ((_, _, p), a) in pairs.iter().zip(&alpha) {
            axpy(*a, &p.v, &mut mix);
        }
        let keys = reps.iter().map(|(k, _)| *k).collect();
        Ok((
            mix,
            FusionCache {
                keys,
                pairs,
                pre,
                alpha,
            },
        ))
    }

    /// Gradients w.r.t. each input representation (aligned with `reps`);
    /// accumulates the `W_cross` gradient.
    pub fn fuse_all_backward(
        &self,
        reps: &[(RepKey, &[f64])],
        cache: &FusionCache,
        d_mix: &[f64],
        attn: &CrossAttnParams,
        grad: &mut CrossAttnParams,
    ) -> Vec<Vec<f64>> {
        let mut d_reps: Vec<Vec<f64>> = reps.iter().map(|(_, v)| vec![0.0; v.len()]).collect();
        let d_alpha: Vec<f64> = cache.pairs.iter().map(|(_, _, p)| dot(d_mix, &p.v)).collect();
        let d_logit = softmax_backward(&cache.alpha, &d_alpha);
        for (((i, j, fwd), a), (dl, pre)) in cache
            .pairs
            .iter()
            .zip(&cache.alpha)
            .zip(d_logit.iter().zip(&cache.pre))
        {
            let d_pre = dl * leaky_relu_grad(*pre);
            axpy(d_pre, &fwd.v, &mut grad.w_cross);
            let mut dv: Vec<f64> = d_mix.iter().map(|g| a * g).collect();
            axpy(d_pre, &attn.w_cross, &mut dv);
            let sketch = &self.pairs[&(cache.keys[*i], cache.keys[*j])];
            let (lo, hi) = (*i.min(j), *i.max(j));
            let (left, right) = d_reps.split_at_mut(hi);
            let (dx, dy) = if i < j {
                (&mut left[lo], &mut right[0])
            } else {
                (&mut right[0], &mut left[lo])
            };
            fuse_pair_backward(fwd, &dv, sketch, &self.fft, dx, dy);
        }
        d_reps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_sketch_of_basis_vector() {
        let h = vec![3, 0, 3, 1];
        let s = vec![1.0, -1.0, -1.0, 1.0];
        for i in 0..4 {
            let mut e = vec![0.0; 4];
            e[i] = 1.0;
            let out = count_sketch(&e, &h, &s, 5);
            for (k, v) in out.iter().enumerate() {
                assert_eq!(*v, if k == h[i] { s[i] } else { 0.0 });
            }
        }
    }

    #[test]
    fn count_sketch_linear_on_integers() {
        let sk = PairSketch::generate(4, 16, 16, 8);
        let x: Vec<f64> = (0..16).map(|i| (i as f64) - 7.0).collect();
        let y: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let lhs = count_sketch(&xy, &sk.h1, &sk.s1, 8);
        let a = count_sketch(&x, &sk.h1, &sk.s1, 8);
        let b = count_sketch(&y, &sk.h1, &sk.s1, 8);
        let rhs: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn signed_sqrt_cases() {
        assert_eq!(signed_sqrt_combine(&[4.0], &[0.0]), vec![2.0]);
        assert_eq!(signed_sqrt_combine(&[-4.0], &[0.0]), vec![-2.0]);
        assert_eq!(signed_sqrt_combine(&[0.0], &[9.0]), vec![3.0]);
        assert_eq!(signed_sqrt_grad(0.0), 0.0);
    }

    #[test]
    fn maclaurin_cases() {
        let sk = PairSketch::generate(1, 3, 2, 16);
        assert_eq!(random_maclaurin(&[0.0; 3], &[1.0, 2.0], &sk.w1, &sk.w2), vec![0.0; 16]);
        let ones = |n| Mat {
            rows: 1,
            cols: n,
            data: vec![1.0; n],
        };
        let v = random_maclaurin(&[1.0, 2.0, 3.0], &[0.5, -1.5], &ones(3), &ones(2));
        assert_eq!(v, vec![6.0 * -1.0]);
    }

    #[test]
    fn scalar_tensor_sketch() {
        let sk = PairSketch::generate(7, 4, 3, 1);
        let x = [1.0, -2.0, 0.5, 3.0];
        let y = [2.0, 1.0, -1.0];
        let sx: f64 = x.iter().zip(&sk.s1).map(|(a, b)| a * b).sum();
        let sy: f64 = y.iter().zip(&sk.s2).map(|(a, b)| a * b).sum();
        let v = tensor_sketch(&x, &y, &sk, &FftPair::new(1));
        assert!((v[0] - sx * sy).abs() < 1e-12);
    }

    #[test]
    fn default_membership_has_45_pairs() {
        let keys = default_membership();
        assert_eq!(keys.len(), 10);
        let members: Vec<(RepKey, usize)> = keys.iter().map(|&k| (k, 4)).collect();
        let layer = CrossMpm::new(0, 8, &members).unwrap();
        assert_eq!(layer.num_pairs(), 45);
    }

    #[test]
    fn degenerate_and_singleton_fusion() {
        let a = RepKey::new(Modality::Dialogue, Role::Patient);
        let b = RepKey::new(Modality::Online, Role::Doctor);
        let layer = CrossMpm::new(3, 8, &[(a, 3), (b, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = CrossAttnParams::init(8, &mut rng);
        let x = [0.3, -1.0, 2.0];
        let y = [1.0, 0.5];
        assert!(matches!(
            layer.fuse_all(&[(a, &x)], &attn),
            Err(Error::DegenerateFusion(1))
        ));
        let (mix, cache) = layer.fuse_all(&[(a, &x), (b, &y)], &attn).unwrap();
        assert_eq!(cache.weights(), &[1.0]);
        let v1 = fuse_pair(&x, &y, layer.pair_sketch(a, b).unwrap(), layer.fft());
        assert_eq!(mix, v1.v);
        // Input order is irrelevant.
        let (mix2, _) = layer.fuse_all(&[(b, &y), (a, &x)], &attn).unwrap();
        assert_eq!(mix, mix2);
    }

    #[test]
    fn zero_attention_is_uniform() {
        let keys: Vec<RepKey> = default_membership().into_iter().take(4).collect();
        let members: Vec<(RepKey, usize)> = keys.iter().map(|&k| (k, 3)).collect();
        let layer = CrossMpm::new(9, 16, &members).unwrap();
        let attn = CrossAttnParams { w_cross: vec![0.0; 16] };
        let vecs = [[1.0, 2.0, 3.0], [0.1, -0.2, 0.3], [5.0, 0.0, -1.0], [0.0, 1.0, 1.0]];
        let reps: Vec<(RepKey, &[f64])> = keys.iter().zip(&vecs).map(|(k, v)| (*k, &v[..])).collect();
        let (_, cache) = layer.fuse_all(&reps, &attn).unwrap();
        assert_eq!(cache.num_pairs(), 6);
        for w in cache.weights() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn seeds_regenerate_bitwise() {
        let members: Vec<(RepKey, usize)> = default_membership().iter().map(|&k| (k, 5)).collect();
        let a = CrossMpm::new(42, 32, &members).unwrap();
        let b = CrossMpm::new(42, 32, &members).unwrap();
        let c = CrossMpm::new(43, 32, &members).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn rep_key_parsing() {
        assert_eq!("online.doctor".parse::<RepKey>().unwrap(), RepKey::new(Modality::Online, Role::Doctor));
        assert!("dialogue.hospital".parse::<RepKey>().is_err());
        assert!("bogus".parse::<RepKey>().is_err());
        for k in default_membership() {
            assert_eq!(k.to_string().parse::<RepKey>().unwrap(), k);
        }
    }
}
