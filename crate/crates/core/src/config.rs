//! Run configuration: UTF-8 `key=value` lines (blank lines and `#` comments
//! ignored), then command-line overrides in the same syntax. Keys are
//! `gen.*`, `model.*`, `train.*` plus a few paths; unknown keys are errors.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::predictor::{format_membership, parse_membership, ModelConfig, TrainConfig};
use crate::synthgen::GenConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Model file.
    pub model_path: Option<PathBuf>,
    /// Output directory or file.
    pub out: Option<PathBuf>,
    /// Worker threads for multi-seed runs and evaluation.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            model_path: None,
            out: None,
            jobs: 1,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset directory"),
    ("model", "model file"),
    ("out", "output directory or file"),
    ("jobs", "worker threads for multi-seed runs and evaluation"),
    ("gen.patients", "number of patients"),
    ("gen.doctors", "number of doctors"),
    ("gen.hospitals", "number of hospitals"),
    ("gen.diseases", "number of diseases"),
    ("gen.consultations", "number of online consultations"),
    ("gen.offline_visits", "number of in-person visits"),
    ("gen.failure_rate", "target failure rate"),
    ("gen.s_match", "specialty-mismatch effect"),
    ("gen.s_latency", "reply-latency effect"),
    ("gen.s_text", "outcome-word strength in late dialogue turns"),
    ("gen.s_recency", "doctor activity-trend effect"),
    ("gen.s_doctor", "doctor quality effect"),
    ("gen.s_patient", "frequent-consulter effect"),
    ("gen.dialogue_length", "mean sentences per dialogue"),
    ("gen.span_days", "observation span of the generated data, days"),
    ("gen.seed", "generator seed"),
    ("model.entity_dim", "entity embedding width"),
    ("model.relation_dim", "relation embedding width"),
    ("model.attr_dim", "attribute embedding width"),
    ("model.id_dim", "id embedding width"),
    ("model.layers", "propagation layers"),
    ("model.text_dim", "sentence embedding width (even)"),
    ("model.text_seed", "sentence hashing seed"),
    ("model.position_mode", "dialogue positions: ordinal or minutes"),
    ("model.fusion_dim", "fused vector width"),
    ("model.fusion_seed", "sketch seed"),
    ("model.hidden", "classifier hidden width"),
    ("model.window_length", "window length, seconds"),
    ("model.observation_span", "observation span, seconds"),
    ("model.offline_dynamic", "apply windows to the offline view too"),
    ("model.membership", "comma-separated fusion members, e.g. dialogue.patient,online.doctor"),
    ("train.lambda", "L2 weight"),
    ("train.learning_rate", "prediction-phase step size"),
    ("train.kg_learning_rate", "ranking-phase step size"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "prediction minibatch size"),
    ("train.kg_batch_size", "ranking minibatch size"),
    ("train.seed", "training seed (split, init, batches)"),
    ("train.split", "train,validation,test fractions"),
    ("train.runs", "runs per experiment"),
    ("train.mode", "ablation mode: A, B, C, D or full"),
    ("train.threshold", "decision threshold on the failure probability"),
    ("train.pos_weight", "weight of failure instances in the loss"),
    ("train.optimizer", "sgd or adam"),
    ("train.clip_norm", "gradient-norm clip, 0 disables"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_split(key: &str, value: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("{key}: expected three comma-separated fractions, got `{value}`"))),
    }
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// `key=value` pairs of a config text, in order.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, format!("expected key=value, got `{line}`")))?;
        let k = k.trim();
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::parse(origin, i + 1, format!("duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (g, m, t) = (&mut self.gen, &mut self.model, &mut self.train);
        match key {
            "data" => self.data = opt_path(value),
            "model" => self.model_path = opt_path(value),
            "out" => self.out = opt_path(value),
            "jobs" => self.jobs = parse(key, value)?,
            "gen.patients" => g.patients = parse(key, value)?,
            "gen.doctors" => g.doctors = parse(key, value)?,
            "gen.hospitals" => g.hospitals = parse(key, value)?,
            "gen.diseases" => g.diseases = parse(key, value)?,
            "gen.consultations" => g.consultations = parse(key, value)?,
            "gen.offline_visits" => g.offline_visits = parse(key, value)?,
            "gen.failure_rate" => g.failure_rate = parse(key, value)?,
            "gen.s_match" => g.s_match = parse(key, value)?,
            "gen.s_latency" => g.s_latency = parse(key, value)?,
            "gen.s_text" => g.s_text = parse(key, value)?,
            "gen.s_recency" => g.s_recency = parse(key, value)?,
            "gen.s_doctor" => g.s_doctor = parse(key, value)?,
            "gen.s_patient" => g.s_patient = parse(key, value)?,
            "gen.dialogue_length" => g.dialogue_length = parse(key, value)?,
            "gen.span_days" => g.span_days = parse(key, value)?,
            "gen.seed" => g.seed = parse(key, value)?,
            "model.entity_dim" => m.entity_dim = parse(key, value)?,
            "model.relation_dim" => m.relation_dim = parse(key, value)?,
            "model.attr_dim" => m.attr_dim = parse(key, value)?,
            "model.id_dim" => m.id_dim = parse(key, value)?,
            "model.layers" => m.layers = parse(key, value)?,
            "model.text_dim" => m.text_dim = parse(key, value)?,
            "model.text_seed" => m.text_seed = parse(key, value)?,
            "model.position_mode" => {
                m.position_mode = value.parse().map_err(|e: String| Error::Config(format!("{key}: {e}")))?
            }
            "model.fusion_dim" => m.fusion_dim = parse(key, value)?,
            "model.fusion_seed" => m.fusion_seed = parse(key, value)?,
            "model.hidden" => m.hidden = parse(key, value)?,
            "model.window_length" => m.window_length = parse(key, value)?,
            "model.observation_span" => m.observation_span = parse(key, value)?,
            "model.offline_dynamic" => m.offline_dynamic = parse(key, value)?,
            "model.membership" => {
                m.membership = parse_membership(value).map_err(|e| Error::Config(format!("{key}: {e}")))?
            }
            "train.lambda" => t.lambda = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.kg_learning_rate" => t.kg_learning_rate = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.kg_batch_size" => t.kg_batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.split" => t.split = parse_split(key, value)?,
            "train.runs" => t.runs = parse(key, value)?,
            "train.mode" => t.mode = value.parse().map_err(|e: String| Error::Config(format!("{key}: {e}")))?,
            "train.threshold" => t.threshold = parse(key, value)?,
            "train.pos_weight" => t.pos_weight = parse(key, value)?,
            "train.optimizer" => {
                t.optimizer = value.parse().map_err(|e: String| Error::Config(format!("{key}: {e}")))?
            }
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (g, m, t) = (&self.gen, &self.model, &self.train);
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        match key {
            "data" => Some(path_str(&self.data)),
            "model" => Some(path_str(&self.model_path)),
            "out" => Some(path_str(&self.out)),
            "jobs" => s(self.jobs),
            "gen.patients" => s(g.patients),
            "gen.doctors" => s(g.doctors),
            "gen.hospitals" => s(g.hospitals),
            "gen.diseases" => s(g.diseases),
            "gen.consultations" => s(g.consultations),
            "gen.offline_visits" => s(g.offline_visits),
            "gen.failure_rate" => s(g.failure_rate),
            "gen.s_match" => s(g.s_match),
            "gen.s_latency" => s(g.s_latency),
            "gen.s_text" => s(g.s_text),
            "gen.s_recency" => s(g.s_recency),
            "gen.s_doctor" => s(g.s_doctor),
            "gen.s_patient" => s(g.s_patient),
            "gen.dialogue_length" => s(g.dialogue_length),
            "gen.span_days" => s(g.span_days),
            "gen.seed" => s(g.seed),
            "model.entity_dim" => s(m.entity_dim),
            "model.relation_dim" => s(m.relation_dim),
            "model.attr_dim" => s(m.attr_dim),
            "model.id_dim" => s(m.id_dim),
            "model.layers" => s(m.layers),
            "model.text_dim" => s(m.text_dim),
            "model.text_seed" => s(m.text_seed),
            "model.position_mode" => s(m.position_mode),
            "model.fusion_dim" => s(m.fusion_dim),
            "model.fusion_seed" => s(m.fusion_seed),
            "model.hidden" => s(m.hidden),
            "model.window_length" => s(m.window_length),
            "model.observation_span" => s(m.observation_span),
            "model.offline_dynamic" => s(m.offline_dynamic),
            "model.membership" => s(format_membership(&m.membership)),
            "train.lambda" => s(t.lambda),
            "train.learning_rate" => s(t.learning_rate),
            "train.kg_learning_rate" => s(t.kg_learning_rate),
            "train.epochs" => s(t.epochs),
            "train.batch_size" => s(t.batch_size),
            "train.kg_batch_size" => s(t.kg_batch_size),
            "train.seed" => s(t.seed),
            "train.split" => Some(format!("{},{},{}", t.split.0, t.split.1, t.split.2)),
            "train.runs" => s(t.runs),
            "train.mode" => s(t.mode),
            "train.threshold" => s(t.threshold),
            "train.pos_weight" => s(t.pos_weight),
            "train.optimizer" => s(t.optimizer),
            "train.clip_norm" => s(t.clip_norm),
            _ => None,
        }
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Applies a config file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply(&parse_pairs(&text, path)?)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|(k, _)| (*k, self.get(k).expect("every listed key resolves")))
            .collect()
    }

    /// The resolved config as a parseable `key=value` text.
    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}={v}: {e}"));
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["train.mode=B", "gen.s_text=0.25", "data=/tmp/x", "train.split=0.6,0.2,0.2",
            "model.membership=dialogue.patient,online.doctor,offline.disease"])
            .unwrap();
        let mut d = RunConfig::default();
        d.apply(&parse_pairs(&c.to_text(), Path::new("mem")).unwrap()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("train.epoch", "3").is_err());
        assert!(c.set("train.epochs", "three").is_err());
        assert!(c.set("train.split", "0.5,0.5").is_err());
        assert!(c.set("model.membership", "dialogue.hospital,online.doctor").is_err());
        assert!(c.apply_overrides(&["train.epochs"]).is_err());
        let p = Path::new("cfg");
        assert!(parse_pairs("a=1\nb", p).is_err());
        assert!(parse_pairs("a=1\na=2", p).is_err());
        let pairs = parse_pairs("# comment\n\n  train.epochs = 4 \n", p).unwrap();
        assert_eq!(pairs, vec![("train.epochs".to_string(), "4".to_string())]);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "train.epochs=4\ntrain.lambda=0.5\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        c.apply_overrides(&["train.epochs=7"]).unwrap();
        assert_eq!((c.train.epochs, c.train.lambda), (7, 0.5));
    }
}
