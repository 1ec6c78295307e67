//! Executes a preset into a run directory.
//!
//! A run directory holds `config.toml`, `metrics.csv`, `checkpoint.bin`
//! (best validation loss) and `summary.json`. `run.lock` exists while a
//! process owns the directory.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{MetricsRow, MetricsWriter};
use super::presets::{ExperimentPreset, Regularization};
use crate::data::{count_holdout_patterns, gen_extended_arithmetic, Batch, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::eval::{eval_extended_range, EvalReport};
use crate::model::format_param_count;
use crate::train::{Observer, RunOptions, RunState, StepStats, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOCK_FILE: &str = "run.lock";

/// Metrics of one evaluation, without per-record detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub iter: u64,
    pub addition_acc: Option<f64>,
    pub subtraction_acc: Option<f64>,
    pub facts_acc: Option<f64>,
    pub combined_score: f64,
    pub holdout_correct: Option<usize>,
    pub val_loss: f64,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            iter: r.iter,
            addition_acc: r.addition_acc,
            subtraction_acc: r.subtraction_acc,
            facts_acc: r.facts_acc,
            combined_score: r.combined_score,
            holdout_correct: r.holdout_correct,
            val_loss: r.val_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRangeSummary {
    pub lo: u32,
    pub hi: u32,
    pub addition_acc: f64,
    pub subtraction_acc: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub task: TaskKind,
    pub regularization: Regularization,
    pub model: String,
    pub seed: u64,
    pub parameters: usize,
    pub parameters_label: String,
    pub iters: u64,
    pub best_val_loss: f64,
    pub best_combined_score: Option<f64>,
    pub best_combined_iter: Option<u64>,
    pub best: Option<ReportSummary>,
    #[serde(rename = "final")]
    pub last: Option<ReportSummary>,
    pub max_holdout_correct: Option<usize>,
    /// Evaluations at which addition and subtraction were both 100%.
    pub perfect_arithmetic_iters: Vec<u64>,
    pub extended_range: Option<ExtendedRangeSummary>,
    /// Training batches checked for held-out expressions.
    pub audited_batches: u64,
    /// Held-out expressions found in those batches.
    pub holdout_pattern_hits: u64,
}

impl RunSummary {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::RunDir {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exclusive ownership of a run directory for the guard's lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::RunDir {
                path: dir.to_path_buf(),
                reason: if e.kind() == std::io::ErrorKind::AlreadyExists {
                    format!("locked by another run (remove {LOCK_FILE} if stale)")
                } else {
                    e.to_string()
                },
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Forwards callbacks, appends a metrics row per report, and audits
/// every training batch for held-out expressions.
struct Recorder<'a> {
    metrics: MetricsWriter,
    vocab: &'a Vocab,
    audited: u64,
    hits: u64,
    inner: &'a mut dyn Observer,
}

impl Observer for Recorder<'_> {
    fn on_batch(&mut self, iter: u64, batch: &Batch) {
        self.audited += 1;
        self.hits += count_holdout_patterns(batch, self.vocab) as u64;
        self.inner.on_batch(iter, batch);
    }

    fn on_step(&mut self, stats: &StepStats) {
        self.inner.on_step(stats);
    }

    fn on_report(&mut self, report: &EvalReport, state: &RunState) -> Result<()> {
        self.metrics.append(&MetricsRow::from(report))?;
        self.inner.on_report(report, state)
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<DirLock> {
    let fail = |reason: String| Error::RunDir {
        path: dir.to_path_buf(),
        reason,
    };
    std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    let lock = DirLock::acquire(dir)?;
    let outputs = [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE];
    let existing: Vec<&str> = outputs.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if !existing.is_empty() {
        if !force {
            return Err(fail(format!(
                "already holds run output ({}); pass --force to overwrite",
                existing.join(", ")
            )));
        }
        for f in existing {
            std::fs::remove_file(dir.join(f)).map_err(|e| fail(e.to_string()))?;
        }
    }
    Ok(lock)
}

/// Trains `preset` into `dir` and writes every run artifact.
pub fn run_experiment(
    preset: &ExperimentPreset,
    dir: &Path,
    force: bool,
    observer: &mut dyn Observer,
) -> Result<RunSummary> {
    preset.validate()?;
    let _lock = prepare_dir(dir, force)?;
    std::fs::write(dir.join(CONFIG_FILE), preset.to_toml()?)?;

    let dataset = preset.task.dataset();
    let mut trainer = Trainer::new(preset.model.clone(), preset.train.clone())?;
    let opts = RunOptions {
        eval: preset.eval_options(),
        checkpoint_path: Some(dir.join(CHECKPOINT_FILE)),
    };
    let mut recorder = Recorder {
        metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
        vocab: &dataset.vocab,
        audited: 0,
        hits: 0,
        inner: observer,
    };
    let state = trainer.run(&dataset, &opts, &mut recorder)?;

    let extended_range = match preset.extended_range {
        Some((lo, hi)) => {
            let records = gen_extended_arithmetic(lo, hi)?;
            let (add, sub) = eval_extended_range(
                trainer.model(),
                &dataset.vocab,
                &records,
                &preset.eval_options(),
                trainer.rng(),
            )?;
            Some(ExtendedRangeSummary {
                lo,
                hi,
                addition_acc: add,
                subtraction_acc: sub,
            })
        }
        None => None,
    };

    let parameters = preset.model.param_count(true);
    let summary = RunSummary {
        id: preset.id.clone(),
        task: preset.task,
        regularization: preset.regularization,
        model: preset.model_label(),
        seed: preset.train.seed,
        parameters,
        parameters_label: format_param_count(parameters),
        iters: state.iter,
        best_val_loss: state.best_val_loss,
        best_combined_score: state.best_combined_score,
        best_combined_iter: state.best_combined_iter,
        best: state.best_report().map(ReportSummary::from),
        last: state.final_report().map(ReportSummary::from),
        max_holdout_correct: state.history.iter().filter_map(|r| r.holdout_correct).max(),
        perfect_arithmetic_iters: state
            .history
            .iter()
            .filter(|r| r.arithmetic_perfect())
            .map(|r| r.iter)
            .collect(),
        extended_range,
        audited_batches: recorder.audited,
        holdout_pattern_hits: recorder.hits,
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
