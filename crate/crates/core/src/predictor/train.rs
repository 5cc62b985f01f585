//! Alternating optimization, checkpointing, evaluation, ablation and
//! early-prediction curves.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;

use super::model::{stream, Model, ModelParams, Prepared};
use super::{
    bce_loss_weighted, summarize, AblationMode, Confusion, Metrics, ModelConfig, Optimizer, Prediction,
    Summary, TrainConfig,
};
use crate::dataset::Dataset;
use crate::dialogue::{ConsultationRecord, Label, TruncateMode};
use crate::error::{Error, Result};
use crate::linalg::{Adam, Params};

const STREAM_SPLIT: u64 = 11;
const STREAM_TRAIN: u64 = 12;

/// Default horizon of the hours curve.
pub const CURVE_HOURS: usize = 24;

/// Indices into the consultation list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded split, stratified by label so every part keeps the class ratio.
pub fn split_indices(labels: &[Label], fractions: (f64, f64, f64), seed: u64) -> Split {
    let mut rng = stream(seed, STREAM_SPLIT);
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut split = Split::default();
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((n * fractions.0).round() as usize).min(idx.len());
        let n_val = ((n * fractions.1).round() as usize).min(idx.len() - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.validation.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    split
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean triple-ranking loss of the graph phase.
    pub kg_loss: f64,
    /// Mean prediction loss of the classifier phase.
    pub pred_loss: f64,
    /// `λ‖Θ‖²` after the epoch.
    pub reg: f64,
    pub validation: Metrics,
    pub validation_loss: f64,
}

impl EpochLog {
    pub fn overall(&self) -> f64 {
        self.kg_loss + self.pred_loss + self.reg
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation F1.
    pub model: Model,
    pub split: Split,
    pub history: Vec<EpochLog>,
    /// 0 when no epoch improved on the initialization (or none ran).
    pub best_epoch: usize,
    pub validation: Metrics,
    pub test: Metrics,
}

fn labels_of(dataset: &Dataset) -> Result<Vec<Label>> {
    dataset
        .consultations
        .iter()
        .map(|c| {
            c.label
                .ok_or_else(|| Error::Schema(format!("consultation `{}` has no label", c.id)))
        })
        .collect()
}

fn metrics_of(preds: &[Prediction]) -> Metrics {
    let (p, t): (Vec<Label>, Vec<Label>) = preds
        .iter()
        .filter_map(|p| Some((p.predicted, p.label?)))
        .unzip();
    Confusion::from_labels(&p, &t).metrics()
}

/// Unweighted mean BCE of the predictions.
fn loss_of(preds: &[Prediction]) -> f64 {
    let (z, y): (Vec<f64>, Vec<Label>) = preds.iter().filter_map(|p| Some((p.logit, p.label?))).unzip();
    bce_loss_weighted(&z, &y, 1.0).0
}

enum Stepper {
    Sgd,
    Adam(Adam),
}

impl Stepper {
    fn new(kind: Optimizer, params: &ModelParams) -> Self {
        match kind {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam => Stepper::Adam(Adam::new(params.num_params())),
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        match self {
            Stepper::Sgd => params.sgd_step(grads, lr),
            Stepper::Adam(a) => a.step(params, grads, lr),
        }
    }
}

/// Step size after norm clipping.
fn clipped(grads: &ModelParams, lr: f64, clip_norm: f64) -> f64 {
    if clip_norm == 0.0 {
        return lr;
    }
    let norm = grads.sq_norm().sqrt();
    if norm > clip_norm {
        lr * clip_norm / norm
    } else {
        lr
    }
}

/// Trains one model on `dataset` (which must be fully labeled).
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let labels = labels_of(dataset)?;
    let split = split_indices(&labels, cfg.split, cfg.seed);
    let classes = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<std::collections::BTreeSet<_>>().len();
    if classes(&split.train) < 2 {
        return Err(Error::SingleClass);
    }
    let mut model = Model::new(dataset, model_cfg.clone(), cfg.mode, cfg.seed, cfg.threshold)?;
    model.split = cfg.split;
    let prepared = model.prepare(dataset)?;
    train_prepared(model, &prepared, split, cfg)
}

/// The optimization loop proper. Each epoch alternates a triple-ranking
/// pass over the graph parameters with a prediction pass over all
/// parameters, then checkpoints on validation F1 (validation loss breaks
/// ties).
pub fn train_prepared(mut model: Model, prepared: &Prepared, split: Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = stream(cfg.seed, STREAM_TRAIN);
    let score = |m: &Model| -> Result<(Metrics, f64)> {
        let preds = m.predict_indices(prepared, &split.validation)?;
        Ok((metrics_of(&preds), loss_of(&preds)))
    };
    let (mut best_val, mut best_loss) = score(&model)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let pos_weight = cfg.pos_weight;
    let loss_grad = move |logits: &[f64], insts: &[&super::Instance]| {
        let y: Vec<Label> = insts.iter().map(|i| i.label.unwrap_or(0)).collect();
        bce_loss_weighted(logits, &y, pos_weight)
    };

    // The two phases optimize different objectives and keep separate state.
    let mut kg_opt = Stepper::new(cfg.optimizer, &model.params);
    let mut re_opt = Stepper::new(cfg.optimizer, &model.params);
    for epoch in 1..=cfg.epochs {
        // Graph phase: L_G over every ranking graph, in shuffled batches.
        let (mut kg_sum, mut kg_n) = (0.0, 0usize);
        if model.mode.uses_graph() {
            let g = &*prepared.graphs;
            let mut jobs = Vec::new();
            for vg in [&g.online, &g.offline].into_iter().flatten() {
                for graph in vg.ranking_graphs() {
                    let mut triples = graph.triples().to_vec();
                    triples.shuffle(&mut rng);
                    for chunk in triples.chunks(cfg.kg_batch_size) {
                        jobs.push((vg.view, graph, chunk.to_vec()));
                    }
                }
            }
            jobs.shuffle(&mut rng);
            for (view, graph, chunk) in jobs {
                let mut grads = model.params.zeros_like();
                let (loss, n) = model.ranking_step(g, view, graph, &chunk, &mut rng, Some(&mut grads))?;
                kg_opt.step(&mut model.params, &grads, clipped(&grads, cfg.kg_learning_rate, cfg.clip_norm));
                kg_sum += loss * n as f64;
                kg_n += n;
            }
        }

        // Prediction phase: L_re + λ‖Θ‖².
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let mut re_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let loss = model.batch_backward(prepared, batch, &loss_grad, &mut grads)?;
            grads.add_scaled(&model.params, 2.0 * cfg.lambda);
            re_opt.step(&mut model.params, &grads, clipped(&grads, cfg.learning_rate, cfg.clip_norm));
            re_sum += loss * batch.len() as f64;
        }
        if !model.params.all_finite() {
            return Err(Error::Config(format!(
                "parameters diverged at epoch {epoch}; lower the learning rate"
            )));
        }

        let (val, val_loss) = score(&model)?;
        let log = EpochLog {
            epoch,
            kg_loss: if kg_n == 0 { 0.0 } else { kg_sum / kg_n as f64 },
            pred_loss: re_sum / order.len().max(1) as f64,
            reg: cfg.lambda * model.params.sq_norm(),
            validation: val,
            validation_loss: val_loss,
        };
        debug!(
            "epoch {epoch}: L_G {:.5} L_re {:.5} reg {:.3e} val F1 {:.4} val loss {:.5}",
            log.kg_loss, log.pred_loss, log.reg, val.f1, val_loss
        );
        history.push(log);
        if val.f1 > best_val.f1 || (val.f1 == best_val.f1 && val_loss < best_loss) {
            best_val = val;
            best_loss = val_loss;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
    }

    model.params = best_params;
    let test = metrics_of(&model.predict_indices(prepared, &split.test)?);
    info!(
        "trained {} seed {}: best epoch {best_epoch}, validation F1 {:.4}, test F1 {:.4}",
        model.mode, model.seed, best_val.f1, test.f1
    );
    Ok(TrainOutcome {
        model,
        split,
        history,
        best_epoch,
        validation: best_val,
        test,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub key: String,
    pub count: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub confusion: Confusion,
    pub predictions: Vec<Prediction>,
    /// Per-group metrics when grouping was requested, sorted by key.
    pub groups: Vec<GroupMetrics>,
}

impl EvalReport {
    /// `metric  mean  stderr` rows for a single evaluation (stderr 0), then
    /// one `group  key  count  f1  precision  recall` row per group.
    pub fn rows(&self) -> Vec<String> {
        let mut rows = summarize(&[self.metrics]).rows();
        for g in &self.groups {
            rows.push(format!(
                "group\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                g.key, g.count, g.metrics.f1, g.metrics.precision, g.metrics.recall
            ));
        }
        rows
    }
}

/// Group key of a consultation: one of its entities (`patient`, `doctor`,
/// `hospital`, `disease`) or the value of a patient attribute, falling back
/// to the doctor's attribute, then `-`.
fn group_key(dataset: &Dataset, c: &ConsultationRecord, by: &str) -> String {
    match by {
        "patient" => c.patient.id.clone(),
        "doctor" => c.doctor.id.clone(),
        "hospital" => c.hospital.id.clone(),
        "disease" => c.disease.id.clone(),
        attr => [&c.patient, &c.doctor]
            .iter()
            .find_map(|e| {
                dataset.attributes.entries.get(*e)?.iter().find(|(n, _)| n == attr).map(|(_, v)| v.clone())
            })
            .unwrap_or_else(|| "-".into()),
    }
}

/// Scores `model` on `subset` (all consultations when `None`).
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    subset: Option<&[usize]>,
    group_by: Option<&str>,
) -> Result<EvalReport> {
    let prepared = model.prepare(dataset)?;
    evaluate_prepared(model, &prepared, dataset, subset, group_by)
}

pub(crate) fn evaluate_prepared(
    model: &Model,
    prepared: &Prepared,
    dataset: &Dataset,
    subset: Option<&[usize]>,
    group_by: Option<&str>,
) -> Result<EvalReport> {
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..prepared.instances.len()).collect();
            &all
        }
    };
    let predictions = model.predict_indices(prepared, idx)?;
    let confusion = confusion_of(&predictions);
    let mut groups = Vec::new();
    if let Some(by) = group_by {
        let mut buckets: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
        for (&i, p) in idx.iter().zip(&predictions) {
            buckets
                .entry(group_key(dataset, &dataset.consultations[i], by))
                .or_default()
                .push(p.clone());
        }
        groups = buckets
            .into_iter()
            .map(|(key, ps)| GroupMetrics {
                key,
                count: ps.len(),
                metrics: metrics_of(&ps),
            })
            .collect();
    }
    Ok(EvalReport {
        metrics: confusion.metrics(),
        confusion,
        predictions,
        groups,
    })
}

fn confusion_of(preds: &[Prediction]) -> Confusion {
    let (p, t): (Vec<Label>, Vec<Label>) = preds
        .iter()
        .filter_map(|p| Some((p.predicted, p.label?)))
        .unzip();
    Confusion::from_labels(&p, &t)
}

// ---------------------------------------------------------------------------
// Multi-run experiments

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub validation: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub mode: AblationMode,
    pub runs: Vec<RunResult>,
    /// Test-split metrics over runs.
    pub summary: Summary,
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results keep index
/// order, so output does not depend on scheduling.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= n {
                            break local;
                        }
                        local.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, t)| t).collect()
}

/// `cfg.runs` independent trainings with seeds `cfg.seed + r`.
pub fn run_experiment(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Experiment> {
    cfg.validate()?;
    let results = parallel_map(cfg.runs, jobs, |r| {
        let run_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(r as u64),
            ..cfg.clone()
        };
        train(dataset, model_cfg, &run_cfg).map(|o| RunResult {
            seed: run_cfg.seed,
            best_epoch: o.best_epoch,
            validation: o.validation,
            test: o.test,
        })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&runs.iter().map(|r| r.test).collect::<Vec<_>>());
    Ok(Experiment {
        mode: cfg.mode,
        runs,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub summary: Summary,
}

impl AblationRow {
    /// `mode  f1_mean  f1_stderr  precision_mean  precision_stderr  recall_mean  recall_stderr`
    pub fn row(&self) -> String {
        let (m, e) = (&self.summary.mean, &self.summary.stderr);
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.mode, m.f1, e.f1, m.precision, e.precision, m.recall, e.recall
        )
    }
}

/// One row per mode A, B, C, D, full. The `jobs` budget is spent on runs
/// (and modes) together.
pub fn ablate(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, jobs: usize) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let modes = AblationMode::ALL;
    let results = parallel_map(modes.len() * cfg.runs, jobs, |i| {
        let (mode, r) = (modes[i / cfg.runs], i % cfg.runs);
        let run_cfg = TrainConfig {
            mode,
            seed: cfg.seed.wrapping_add(r as u64),
            ..cfg.clone()
        };
        train(dataset, model_cfg, &run_cfg).map(|o| o.test)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(modes
        .iter()
        .zip(results.chunks(cfg.runs))
        .map(|(&mode, runs)| AblationRow {
            mode,
            summary: summarize(runs),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Early prediction

/// Metrics when each dialogue in `subset` is cut after `k` hours (k = 1..24)
/// or `k` rounds (k = 1..the longest dialogue), graphs unchanged. `max_k`
/// overrides the horizon.
pub fn early_prediction_curve(
    model: &Model,
    dataset: &Dataset,
    subset: Option<&[usize]>,
    mode: TruncateMode,
    max_k: Option<usize>,
) -> Result<Vec<(usize, Metrics)>> {
    let records: Vec<ConsultationRecord> = match subset {
        Some(idx) => idx.iter().map(|&i| dataset.consultations[i].clone()).collect(),
        None => dataset.consultations.clone(),
    };
    let horizon = max_k.unwrap_or_else(|| match mode {
        TruncateMode::Hours => CURVE_HOURS,
        TruncateMode::Rounds => records.iter().map(|c| c.rounds()).max().unwrap_or(0).max(1),
    });
    let embedder = model.default_embedder();
    let base = model.prepare_with(&Dataset { consultations: Vec::new(), ..dataset.clone() }, &embedder, None)?;
    (1..=horizon)
        .map(|k| {
            let p = model.reprepare(&base, &records, &embedder, Some((mode, k)))?;
            Ok((k, metrics_of(&model.predict(&p)?)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<Label> = (0..200).map(|i| u8::from(i % 10 == 0)).collect();
        let s = split_indices(&labels, (0.8, 0.1, 0.1), 3);
        assert_eq!(s, split_indices(&labels, (0.8, 0.1, 0.1), 3));
        assert_ne!(s, split_indices(&labels, (0.8, 0.1, 0.1), 4));
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (160, 20, 20));
        for part in [&s.train, &s.validation, &s.test] {
            let pos = part.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos * 10, part.len());
        }
        let mut all: Vec<usize> = [s.train, s.validation, s.test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let seq = parallel_map(37, 1, |i| i * i);
        assert_eq!(parallel_map(37, 4, |i| i * i), seq);
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }
}
