//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on a runtime failure, 2 on a usage or configuration error.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::dialogue::TruncateMode;
use crate::error::{Error, Result};
use crate::fusion::sketch_bench;
use crate::predictor::{
    ablate, early_prediction_curve, evaluate, grad_check, split_indices, train, GradBlock, Model,
};
use crate::synthgen::{describe, generate};

#[derive(Debug, Parser)]
#[command(name = "dykonem", version, about = "Consultation-outcome prediction from knowledge networks and dialogues")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Config file of key=value lines, applied before any override.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for multi-seed runs and evaluation.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Log filter for standard error (error, warn, info, debug, trace).
    #[arg(long, value_name = "LEVEL", default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and print its summary (`stat  value`).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Generator seed (gen.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the dataset files (out).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train one model, print `epoch  kg_loss  pred_loss  reg  val_f1  val_loss`
    /// per epoch, then `split  f1  precision  recall` rows.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Where to write the model file (model).
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Ablation mode: A, B, C, D or full (train.mode).
        #[arg(long)]
        mode: Option<String>,
        /// Training seed (train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model: `metric  mean  stderr` rows, then
    /// `group  key  count  f1  precision  recall` rows when grouping.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Model file (model).
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Consultations to score: all, train, validation or test (the
        /// split the model was trained with).
        #[arg(long, default_value = "test")]
        subset: String,
        /// Group by patient, doctor, hospital, disease or an attribute name.
        #[arg(long, value_name = "KEY")]
        group_by: Option<String>,
    },
    /// Print `consultation_id  probability  label` per consultation (`-` for
    /// unlabeled ones).
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Model file (model).
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Train every ablation mode `train.runs` times and print
    /// `mode  f1  f1_se  precision  precision_se  recall  recall_se`.
    /// Generates the dataset from the gen.* keys when no data is given.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Runs per mode (train.runs).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Early-prediction curve of a model on its test split:
    /// `k  f1  precision  recall`.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Model file (model).
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Cut dialogues after k hours or k rounds.
        #[arg(long, default_value = "hours")]
        truncate: String,
        /// Largest k (default 24 hours, or the longest dialogue in rounds).
        #[arg(long)]
        max_k: Option<usize>,
    },
    /// Finite-difference gradient check:
    /// `block  PASS|FAIL  max_rel_err  tolerance  checked  skipped  worst`.
    /// Exits 1 if any block fails.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Seed of the random check points.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Block to check (repeatable; default all).
        #[arg(long)]
        block: Vec<String>,
    },
    /// Sketch accuracy and timing:
    /// `method  n  d  seeds  estimate  exact  rel_err  seconds`.
    FuseBench {
        #[command(flatten)]
        common: Common,
        /// Input width.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Sketch width.
        #[arg(long, default_value_t = 512)]
        d: usize,
        /// Number of sketch seeds averaged.
        #[arg(long, default_value_t = 200)]
        seeds: usize,
        /// Seed of the input vectors.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::Ablate { common, .. }
            | Command::Curve { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::FuseBench { common, .. } => common,
        }
    }

    /// Subcommand shortcuts as config overrides.
    fn shortcuts(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(value) = value {
                v.push(format!("{key}={value}"));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match self {
            Command::Gen { seed, out, .. } => {
                push("gen.seed", seed.map(|s| s.to_string()));
                push("out", path(out));
            }
            Command::Train { data, model, mode, seed, epochs, .. } => {
                push("data", path(data));
                push("model", path(model));
                push("train.mode", mode.clone());
                push("train.seed", seed.map(|s| s.to_string()));
                push("train.epochs", epochs.map(|e| e.to_string()));
            }
            Command::Eval { data, model, .. } | Command::Predict { data, model, .. } | Command::Curve { data, model, .. } => {
                push("data", path(data));
                push("model", path(model));
            }
            Command::Ablate { data, runs, .. } => {
                push("data", path(data));
                push("train.runs", runs.map(|r| r.to_string()));
            }
            Command::Gradcheck { .. } | Command::FuseBench { .. } => {}
        }
        v
    }
}

fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&common.set)?;
    cfg.apply_overrides(&cmd.shortcuts())?;
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required (flag --{key} or config key {key})")))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(required(&cfg.data, "data")?)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    Model::load(required(&cfg.model_path, "model")?)
}

/// Indices of `subset` under the split the model was trained with.
fn subset_indices(model: &Model, ds: &Dataset, subset: &str) -> Result<Option<Vec<usize>>> {
    if subset == "all" {
        return Ok(None);
    }
    let labels: Vec<u8> = ds
        .consultations
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::Config(format!("subset `{subset}` needs a fully labeled dataset"))))
        .collect::<Result<_>>()?;
    let split = split_indices(&labels, model.split, model.seed);
    split
        .get(subset)
        .map(|s| Some(s.to_vec()))
        .ok_or_else(|| Error::Config(format!("unknown subset `{subset}` (all, train, validation, test)")))
}

fn execute(cmd: &Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, line: String| -> Result<()> {
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
    };
    match cmd {
        Command::Gen { .. } => {
            let dir = required(&cfg.out, "out")?;
            let ds = generate(&cfg.gen)?;
            ds.write(dir)?;
            for (k, v) in describe(&ds) {
                w(out, format!("{k}\t{v}"))?;
            }
        }
        Command::Train { .. } => {
            let ds = load_data(cfg)?;
            let path = required(&cfg.model_path, "model")?;
            let outcome = train(&ds, &cfg.model, &cfg.train)?;
            for h in &outcome.history {
                w(
                    out,
                    format!(
                        "epoch\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        h.epoch, h.kg_loss, h.pred_loss, h.reg, h.validation.f1, h.validation_loss
                    ),
                )?;
            }
            w(out, format!("best_epoch\t{}", outcome.best_epoch))?;
            for (name, m) in [("validation", outcome.validation), ("test", outcome.test)] {
                w(out, format!("{name}\t{:.6}\t{:.6}\t{:.6}", m.f1, m.precision, m.recall))?;
            }
            outcome.model.save(path)?;
            log::info!("model written to {}", path.display());
        }
        Command::Eval { subset, group_by, .. } => {
            let ds = load_data(cfg)?;
            let model = load_model(cfg)?;
            let idx = subset_indices(&model, &ds, subset)?;
            let report = evaluate(&model, &ds, idx.as_deref(), group_by.as_deref())?;
            for row in report.rows() {
                w(out, row)?;
            }
        }
        Command::Predict { .. } => {
            let ds = load_data(cfg)?;
            let model = load_model(cfg)?;
            for p in model.predict(&model.prepare(&ds)?)? {
                let label = p.label.map_or("-".to_string(), |l| l.to_string());
                w(out, format!("{}\t{:.6}\t{label}", p.id, p.probability))?;
            }
        }
        Command::Ablate { .. } => {
            let ds = match &cfg.data {
                Some(dir) => Dataset::load(dir)?,
                None => generate(&cfg.gen)?,
            };
            for row in ablate(&ds, &cfg.model, &cfg.train, cfg.jobs)? {
                w(out, row.row())?;
            }
        }
        Command::Curve { truncate, max_k, .. } => {
            let mode: TruncateMode = truncate.parse().map_err(Error::Config)?;
            let ds = load_data(cfg)?;
            let model = load_model(cfg)?;
            let idx = subset_indices(&model, &ds, "test")?;
            for (k, m) in early_prediction_curve(&model, &ds, idx.as_deref(), mode, *max_k)? {
                w(out, format!("{k}\t{:.6}\t{:.6}\t{:.6}", m.f1, m.precision, m.recall))?;
            }
        }
        Command::Gradcheck { seed, block, .. } => {
            let blocks: Vec<GradBlock> = if block.is_empty() {
                GradBlock::ALL.to_vec()
            } else {
                block.iter().map(|b| b.parse().map_err(Error::Config)).collect::<Result<_>>()?
            };
            let mut failed = Vec::new();
            for b in blocks {
                let report = grad_check(b, *seed)?;
                w(out, report.to_string())?;
                if !report.passed() {
                    failed.push(b.as_str());
                }
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(failed.join(", ")));
            }
        }
        Command::FuseBench { n, d, seeds, data_seed, .. } => {
            if *n == 0 || *d == 0 || *seeds == 0 {
                return Err(Error::Config("n, d and seeds must be positive".into()));
            }
            for row in sketch_bench(*n, *d, *seeds, *data_seed) {
                w(out, row.row(*n, *d, *seeds))?;
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the subcommand, writes results
/// to `out` and diagnostics to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                // --help and --version belong on stdout.
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.command.common().log_level)
        .target(env_logger::Target::Stderr)
        .try_init();
    let cfg = match resolve(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    for (k, v) in cfg.resolved() {
        log::info!("config {k}={v}");
    }
    match execute(&cli.command, &cfg, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// [`run`] on the process arguments and standard output.
pub fn main_exit_code() -> i32 {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    run(std::env::args_os(), &mut lock)
}
