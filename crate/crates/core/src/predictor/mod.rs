//! Classifier head, losses, metrics, the end-to-end model, training and the
//! evaluation modes built on it.

mod check;
mod io;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dialogue::{Label, PositionMode};
use crate::error::{Error, Result};
use crate::fusion::{default_membership, RepKey};
use crate::graph::{DEFAULT_OBSERVATION_SPAN, DEFAULT_WINDOW_LENGTH};
use crate::linalg::{
    add_assign, dot, join, leaky_relu, leaky_relu_grad, log_sigmoid, sigmoid, visit_mat,
    visit_vec, Mat, Params,
};

pub use check::{grad_check, grad_check_end_to_end, GradBlock, LINEAR_TOLERANCE, TOLERANCE};
pub use io::{FORMAT_VERSION, MAGIC};
pub use model::{Instance, Model, ModelParams, Prediction, Prepared};
pub use train::{
    ablate, early_prediction_curve, evaluate, run_experiment, split_indices, train, AblationRow,
    EpochLog, EvalReport, Experiment, Split, TrainOutcome,
};

// ---------------------------------------------------------------------------
// Classifier

/// Three affine layers `d → h → h → 1` with LeakyReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        ClassifierParams {
            w1: Mat::xavier(hidden, d, rng),
            b1: vec![0.0; hidden],
            w2: Mat::xavier(hidden, hidden, rng),
            b2: vec![0.0; hidden],
            w3: Mat::xavier(1, hidden, rng).data,
            b3: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams {
            w1: Mat::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Mat::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
            w3: vec![0.0; self.w3.len()],
            b3: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }
}

impl Params for ClassifierParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        visit_mat(prefix, "w1", &self.w1, f);
        visit_vec(prefix, "b1", &self.b1, f);
        visit_mat(prefix, "w2", &self.w2, f);
        visit_vec(prefix, "b2", &self.b2, f);
        visit_vec(prefix, "w3", &self.w3, f);
        f(join(prefix, "b3"), vec![1], std::slice::from_ref(&self.b3));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "w1"), &mut self.w1.data);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2.data);
        f(join(prefix, "b2"), &mut self.b2);
        f(join(prefix, "w3"), &mut self.w3);
        f(join(prefix, "b3"), std::slice::from_mut(&mut self.b3));
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

pub fn classifier_forward(x: &[f64], p: &ClassifierParams) -> (f64, ClassifierCache) {
    let mut z1 = p.w1.matvec(x);
    add_assign(&mut z1, &p.b1);
    let a1: Vec<f64> = z1.iter().map(|&v| leaky_relu(v)).collect();
    let mut z2 = p.w2.matvec(&a1);
    add_assign(&mut z2, &p.b2);
    let a2: Vec<f64> = z2.iter().map(|&v| leaky_relu(v)).collect();
    let logit = dot(&p.w3, &a2) + p.b3;
    (
        logit,
        ClassifierCache {
            x: x.to_vec(),
            z1,
            a1,
            z2,
            a2,
        },
    )
}

/// Accumulates parameter gradients and returns `∂/∂x`.
pub fn classifier_backward(
    cache: &ClassifierCache,
    d_logit: f64,
    p: &ClassifierParams,
    g: &mut ClassifierParams,
) -> Vec<f64> {
    g.b3 += d_logit;
    for (gw, a) in g.w3.iter_mut().zip(&cache.a2) {
        *gw += d_logit * a;
    }
    let dz2: Vec<f64> = p
        .w3
        .iter()
        .zip(&cache.z2)
        .map(|(w, z)| d_logit * w * leaky_relu_grad(*z))
        .collect();
    g.w2.add_outer(&dz2, &cache.a1);
    add_assign(&mut g.b2, &dz2);
    let da1 = p.w2.matvec_t(&dz2);
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&cache.z1)
        .map(|(d, z)| d * leaky_relu_grad(*z))
        .collect();
    g.w1.add_outer(&dz1, &cache.x);
    add_assign(&mut g.b1, &dz1);
    p.w1.matvec_t(&dz1)
}

/// `(logit, σ(logit))` for one fused vector.
pub fn classify(v_mix: &[f64], p: &ClassifierParams) -> (f64, f64) {
    let (logit, _) = classifier_forward(v_mix, p);
    (logit, sigmoid(logit))
}

/// Failure (1) iff the probability strictly exceeds the threshold.
pub fn decide(probability: f64, threshold: f64) -> Label {
    u8::from(probability > threshold)
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy of logits against labels (1 = positive).
pub fn bce_loss(logits: &[f64], labels: &[Label]) -> f64 {
    bce_loss_weighted(logits, labels, 1.0).0
}

/// BCE with positive instances weighted by `pos_weight`, normalized by the
/// instance count. Also returns `∂loss/∂logit`.
pub fn bce_loss_weighted(logits: &[f64], labels: &[Label], pos_weight: f64) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        if y == 1 {
            loss -= pos_weight * log_sigmoid(z);
            grad.push(pos_weight * (sigmoid(z) - 1.0) / n);
        } else {
            loss -= log_sigmoid(-z);
            grad.push(sigmoid(z) / n);
        }
    }
    (loss / n, grad)
}

/// `L_G + L_re + λ‖Θ‖²`
pub fn overall_loss<P: Params + ?Sized>(l_g: f64, l_re: f64, theta: &P, lambda: f64) -> f64 {
    l_g + l_re + lambda * theta.sq_norm()
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[Label], truth: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            f1,
            precision,
            recall,
        }
    }
}

/// Failure-class metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Mean and standard error over runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Summary {
    pub mean: Metrics,
    pub stderr: Metrics,
    pub runs: usize,
}

pub fn summarize(runs: &[Metrics]) -> Summary {
    let n = runs.len();
    let stat = |f: &dyn Fn(&Metrics) -> f64| -> (f64, f64) {
        if n == 0 {
            return (0.0, 0.0);
        }
        let mean = runs.iter().map(f).sum::<f64>() / n as f64;
        if n < 2 {
            return (mean, 0.0);
        }
        let var = runs.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    };
    let (f1, f1e) = stat(&|m| m.f1);
    let (p, pe) = stat(&|m| m.precision);
    let (r, re) = stat(&|m| m.recall);
    Summary {
        mean: Metrics {
            f1,
            precision: p,
            recall: r,
        },
        stderr: Metrics {
            f1: f1e,
            precision: pe,
            recall: re,
        },
        runs: n,
    }
}

impl Summary {
    /// `metric  mean  stderr` rows.
    pub fn rows(&self) -> Vec<String> {
        vec![
            format!("f1\t{:.6}\t{:.6}", self.mean.f1, self.stderr.f1),
            format!("precision\t{:.6}\t{:.6}", self.mean.precision, self.stderr.precision),
            format!("recall\t{:.6}\t{:.6}", self.mean.recall, self.stderr.recall),
        ]
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Which inputs the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationMode {
    /// Dialogue only.
    A,
    /// Dialogue + offline view.
    B,
    /// Dialogue + dynamic online view.
    C,
    /// Dialogue + static online view + offline view.
    D,
    /// Dialogue + dynamic online view + offline view.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::A,
        AblationMode::B,
        AblationMode::C,
        AblationMode::D,
        AblationMode::Full,
    ];

    pub fn uses_online(self) -> bool {
        matches!(self, AblationMode::C | AblationMode::D | AblationMode::Full)
    }

    pub fn uses_offline(self) -> bool {
        matches!(self, AblationMode::B | AblationMode::D | AblationMode::Full)
    }

    pub fn online_dynamic(self) -> bool {
        matches!(self, AblationMode::C | AblationMode::Full)
    }

    pub fn uses_graph(self) -> bool {
        self != AblationMode::A
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::A => "A",
            AblationMode::B => "B",
            AblationMode::C => "C",
            AblationMode::D => "D",
            AblationMode::Full => "full",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(AblationMode::A),
            "B" | "b" => Ok(AblationMode::B),
            "C" | "c" => Ok(AblationMode::C),
            "D" | "d" => Ok(AblationMode::D),
            "full" | "FULL" | "Full" => Ok(AblationMode::Full),
            other => Err(format!("unknown ablation mode `{other}` (A, B, C, D, full)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Entity embedding width `de` (also the attribute-encoder output).
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub attr_dim: usize,
    pub id_dim: usize,
    pub layers: usize,
    pub text_dim: usize,
    pub text_seed: u64,
    pub position_mode: PositionMode,
    pub fusion_dim: usize,
    pub fusion_seed: u64,
    pub hidden: usize,
    pub window_length: i64,
    pub observation_span: i64,
    pub offline_dynamic: bool,
    /// Representations the fusion layer pairs up; keys of views a mode
    /// does not use are dropped.
    pub membership: Vec<RepKey>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            entity_dim: 64,
            relation_dim: 32,
            attr_dim: 64,
            id_dim: 64,
            layers: 2,
            text_dim: 64,
            text_seed: 0,
            position_mode: PositionMode::Ordinal,
            fusion_dim: 512,
            fusion_seed: 0,
            hidden: 64,
            window_length: DEFAULT_WINDOW_LENGTH,
            observation_span: DEFAULT_OBSERVATION_SPAN,
            offline_dynamic: false,
            membership: default_membership(),
        }
    }
}

/// Comma-separated representation keys, e.g. `dialogue.patient,online.doctor`.
pub fn parse_membership(s: &str) -> std::result::Result<Vec<RepKey>, String> {
    s.split(',').map(|k| k.trim().parse()).collect()
}

pub fn format_membership(keys: &[RepKey]) -> String {
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("entity_dim", self.entity_dim),
            ("relation_dim", self.relation_dim),
            ("attr_dim", self.attr_dim),
            ("id_dim", self.id_dim),
            ("layers", self.layers),
            ("text_dim", self.text_dim),
            ("fusion_dim", self.fusion_dim),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.text_dim % 2 != 0 {
            return Err(Error::Config("text_dim must be even (positional encoding)".into()));
        }
        let mut keys = self.membership.clone();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() != self.membership.len() {
            return Err(Error::Config("membership lists a representation twice".into()));
        }
        if keys.len() < 2 {
            return Err(Error::Config("membership needs at least two representations".into()));
        }
        if self.window_length <= 0 || self.observation_span <= 0 {
            return Err(Error::Config("window_length and observation_span must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain minibatch SGD, no momentum.
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

/// Optimization and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    /// Step size of the triple-ranking phase.
    pub kg_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kg_batch_size: usize,
    pub seed: u64,
    pub split: (f64, f64, f64),
    pub runs: usize,
    pub mode: AblationMode,
    pub threshold: f64,
    /// Weight of failure instances in the prediction loss (1 = unweighted).
    pub pos_weight: f64,
    pub optimizer: Optimizer,
    /// Largest gradient norm applied in one step; longer gradients are
    /// rescaled to this length. 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-5,
            learning_rate: 1e-3,
            kg_learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            kg_batch_size: 256,
            seed: 0,
            split: (0.8, 0.1, 0.1),
            runs: 10,
            mode: AblationMode::Full,
            threshold: 0.5,
            pos_weight: 1.0,
            clip_norm: 0.0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|v| !(0.0..=1.0).contains(v)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ({a}, {b}, {c}) must be non-negative and sum to 1")));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.kg_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.kg_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config("pos_weight must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_classifier(d: usize, h: usize) -> ClassifierParams {
        ClassifierParams::init(d, h, &mut ChaCha8Rng::seed_from_u64(0)).zeros_like()
    }

    #[test]
    fn zero_classifier_is_indifferent() {
        let p = zero_classifier(3, 4);
        let (logit, prob) = classify(&[1.0, -2.0, 3.0], &p);
        assert_eq!(logit, 0.0);
        assert_eq!(prob, 0.5);
        assert_eq!(decide(prob, 0.5), 0);
        assert_eq!(decide(0.5000001, 0.5), 1);
    }

    #[test]
    fn identity_path_propagates_value() {
        let mut p = zero_classifier(1, 1);
        p.w1.set(0, 0, 1.0);
        p.w2.set(0, 0, 1.0);
        p.w3[0] = 1.0;
        assert_eq!(classify(&[2.5], &p).0, 2.5);
    }

    #[test]
    fn bce_cases() {
        assert!((bce_loss(&[0.0, 0.0, 0.0], &[1, 0, 1]) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = bce_loss(&[20.0], &[1]);
        assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-22);
        assert!((v - 2.0611536e-9).abs() < 1e-15);
        // Large logits stay finite.
        assert!(bce_loss(&[-800.0, 800.0], &[1, 0]).is_finite());
    }

    #[test]
    fn bce_gradient_matches_differences() {
        let z = [0.3, -1.7, 2.2, 0.0];
        let y = [1, 0, 0, 1];
        let (_, g) = bce_loss_weighted(&z, &y, 3.0);
        for i in 0..z.len() {
            let mut hi = z;
            let mut lo = z;
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (bce_loss_weighted(&hi, &y, 3.0).0 - bce_loss_weighted(&lo, &y, 3.0).0) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn overall_loss_cases() {
        let mut p = zero_classifier(1, 1);
        assert_eq!(overall_loss(0.25, 0.5, &p, 0.0), 0.75);
        assert_eq!(overall_loss(0.25, 0.5, &p, 3.0), 0.75);
        p.b3 = 2.0;
        assert_eq!(overall_loss(0.0, 0.0, &p, 1.0), 4.0);
    }

    #[test]
    fn confusion_arithmetic() {
        let c = Confusion {
            tp: 2,
            fp: 1,
            fn_: 2,
            tn: 5,
        };
        let m = c.metrics();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert!((m.f1 - 0.5714).abs() < 1e-4);

        let perfect = Confusion::from_labels(&[1, 0, 1], &[1, 0, 1]).metrics();
        assert_eq!((perfect.f1, perfect.precision, perfect.recall), (1.0, 1.0, 1.0));
        let none = Confusion::from_labels(&[0, 0, 0], &[1, 0, 1]).metrics();
        assert_eq!((none.f1, none.precision, none.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn summary_stderr() {
        let runs: Vec<Metrics> = [0.5, 0.7]
            .iter()
            .map(|&f1| Metrics {
                f1,
                precision: f1,
                recall: f1,
            })
            .collect();
        let s = summarize(&runs);
        assert!((s.mean.f1 - 0.6).abs() < 1e-15);
        // sd = 0.1414…, stderr = sd / √2 = 0.1
        assert!((s.stderr.f1 - 0.1).abs() < 1e-12);
        assert_eq!(summarize(&runs[..1]).stderr.f1, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            split: (0.8, 0.1, 0.2),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        let odd = ModelConfig {
            text_dim: 7,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn modes() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!(!AblationMode::A.uses_graph());
        assert!(AblationMode::D.uses_online() && !AblationMode::D.online_dynamic());
    }
}
