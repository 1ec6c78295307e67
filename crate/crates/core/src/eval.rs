//! Sampled task accuracy.
//!
//! Every record is completed `attempts` times. Attempt `a` of a record with
//! prompt `p` draws from the stream `sample/<p>/<a>`, so results do not depend
//! on the order in which records are evaluated.

use serde::{Deserialize, Serialize};

use crate::data::{EvalRecord, Task, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, Sampling};
use crate::rng::{Rng, Stream};
use crate::tensor::Float;

pub const DEFAULT_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub attempts: usize,
    pub sampling: Sampling,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            attempts: DEFAULT_ATTEMPTS,
            sampling: Sampling::Temperature(1.0),
        }
    }
}

impl EvalOptions {
    pub fn greedy() -> Self {
        Self {
            attempts: DEFAULT_ATTEMPTS,
            sampling: Sampling::Greedy,
        }
    }
}

/// Successes for one record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTally {
    pub prompt: String,
    pub task: Task,
    pub holdout: bool,
    pub correct: usize,
    pub attempts: usize,
}

/// Completes `record` once per attempt and returns the generated strings.
pub fn complete_record<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    record: &EvalRecord,
    opts: &EvalOptions,
    rng: &Rng,
) -> Result<Vec<String>> {
    let prompt = vocab.encode(&record.prompt)?;
    let stop: Vec<usize> = record.stop_chars().iter().filter_map(|&c| vocab.id(c)).collect();
    let max_new = record.expected.chars().count() + 1;
    let mut streams: Vec<Stream> = (0..opts.attempts)
        .map(|a| rng.stream(&format!("sample/{}/{a}", record.prompt)))
        .collect();
    let outs = model.generate_batch(&prompt, max_new, opts.sampling, &mut streams, &stop)?;
    Ok(outs.iter().map(|ids| vocab.decode(ids)).collect())
}

/// Per-record success counts, in the order of `records`.
pub fn eval_records<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    records: &[EvalRecord],
    opts: &EvalOptions,
    rng: &Rng,
) -> Result<Vec<RecordTally>> {
    if opts.attempts == 0 {
        return Err(Error::Invalid("evaluation needs at least one attempt".into()));
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Invalid(format!(
            "vocabulary of {} characters does not match model vocab_size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    records
        .iter()
        .map(|r| {
            let outs = complete_record(model, vocab, r, opts, rng)?;
            Ok(RecordTally {
                prompt: r.prompt.clone(),
                task: r.task,
                holdout: r.holdout,
                correct: outs.iter().filter(|o| r.is_correct(o)).count(),
                attempts: opts.attempts,
            })
        })
        .collect()
}

/// Correct attempts over all attempts on records of `task`; `None` when no
/// record has that task.
pub fn task_accuracy(tallies: &[RecordTally], task: Task) -> Option<f64> {
    let (correct, total) = tallies
        .iter()
        .filter(|t| t.task == task)
        .fold((0, 0), |(c, n), t| (c + t.correct, n + t.attempts));
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Attempt-weighted mean over the full 100 + 100 + 50 record grid.
pub fn combined_score(add_acc: f64, sub_acc: f64, facts_acc: f64) -> f64 {
    (100.0 * add_acc + 100.0 * sub_acc + 50.0 * facts_acc) / 250.0
}

/// Task metrics at one evaluation point. Accuracies of tasks absent from the
/// dataset are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iter: u64,
    pub addition_acc: Option<f64>,
    pub subtraction_acc: Option<f64>,
    pub facts_acc: Option<f64>,
    /// Correct attempts over all attempts, across every evaluated task.
    pub combined_score: f64,
    pub holdout_correct: Option<usize>,
    pub val_loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tallies: Vec<RecordTally>,
}

impl EvalReport {
    pub fn from_tallies(iter: u64, tallies: Vec<RecordTally>, val_loss: f64, lr: f64) -> Self {
        let (correct, total) = tallies.iter().fold((0, 0), |(c, n), t| (c + t.correct, n + t.attempts));
        let has_holdout = tallies.iter().any(|t| t.holdout);
        let holdout_correct =
            has_holdout.then(|| tallies.iter().filter(|t| t.holdout).map(|t| t.correct).sum());
        Self {
            iter,
            addition_acc: task_accuracy(&tallies, Task::Addition),
            subtraction_acc: task_accuracy(&tallies, Task::Subtraction),
            facts_acc: task_accuracy(&tallies, Task::Fact),
            combined_score: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            holdout_correct,
            val_loss,
            lr,
            tallies,
        }
    }

    /// Both arithmetic accuracies are exactly 1.
    pub fn arithmetic_perfect(&self) -> bool {
        self.addition_acc == Some(1.0) && self.subtraction_acc == Some(1.0)
    }

    /// Attempts available to the holdout tally.
    pub fn holdout_total(&self) -> usize {
        self.tallies.iter().filter(|t| t.holdout).map(|t| t.attempts).sum()
    }

    /// Accuracy over records of `task` that are not held out.
    pub fn seen_accuracy(&self, task: Task) -> Option<f64> {
        let seen: Vec<RecordTally> = self.tallies.iter().filter(|t| !t.holdout).cloned().collect();
        task_accuracy(&seen, task)
    }
}

/// Addition and subtraction accuracy on out-of-range records.
pub fn eval_extended_range<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    records: &[EvalRecord],
    opts: &EvalOptions,
    rng: &Rng,
) -> Result<(f64, f64)> {
    let tallies = eval_records(model, vocab, records, opts, rng)?;
    Ok((
        task_accuracy(&tallies, Task::Addition).unwrap_or(0.0),
        task_accuracy(&tallies, Task::Subtraction).unwrap_or(0.0),
    ))
}
