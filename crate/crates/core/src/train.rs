//! Training loop with periodic evaluation and validation-loss checkpoints.
//!
//! All randomness derives from the run seed through named streams: `init`
//! for parameters, `batch/<iter>` and `dropout/<iter>` for each step,
//! `estimate/<split>/<iter>/<k>` for loss estimates, and the evaluation
//! streams. Resuming from a checkpoint therefore replays the same batches.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::data::{sample_batch, Batch, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{eval_records, EvalOptions, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{adamw_step, clip_grad_norm, lr_at, OptState, TrainConfig};
use crate::rng::Rng;
use crate::tensor::{Float, Graph};

/// Root of every random stream in a run.
pub fn seed_all(seed: u64) -> Rng {
    Rng::new(seed)
}

/// Mean loss over `eval_iters` sampled batches with dropout off.
pub fn estimate_loss<F: Float>(
    model: &Model<F>,
    dataset: &TaskDataset,
    split: Split,
    eval_iters: usize,
    rng: &Rng,
    iter: u64,
) -> Result<f64> {
    if eval_iters == 0 {
        return Err(Error::config("eval_iters", "must be at least 1"));
    }
    let mut total = 0.0;
    for k in 0..eval_iters {
        let mut stream = rng.stream(&format!("estimate/{}/{iter}/{k}", split.as_str()));
        let batch = sample_batch(dataset, &mut stream)?;
        total += model.eval_loss(&batch.x, &batch.y)?;
    }
    Ok(total / eval_iters as f64)
}

/// Diagnostics for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Completed steps after this one.
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Callbacks invoked by [`Trainer::run`].
pub trait Observer {
    fn on_batch(&mut self, _iter: u64, _batch: &Batch) {}

    fn on_step(&mut self, _stats: &StepStats) {}

    fn on_report(&mut self, _report: &EvalReport, _state: &RunState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub eval: EvalOptions,
    /// Where to write the best-validation-loss checkpoint, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub iter: u64,
    pub best_val_loss: f64,
    pub best_combined_score: Option<f64>,
    pub best_combined_iter: Option<u64>,
    pub history: Vec<EvalReport>,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunState {
    fn new(iter: u64, best_val_loss: f64) -> Self {
        Self {
            iter,
            best_val_loss,
            best_combined_score: None,
            best_combined_iter: None,
            history: Vec::new(),
            checkpoint_path: None,
        }
    }

    /// The report at the best combined score, earliest on ties.
    pub fn best_report(&self) -> Option<&EvalReport> {
        let it = self.best_combined_iter?;
        self.history.iter().find(|r| r.iter == it)
    }

    pub fn final_report(&self) -> Option<&EvalReport> {
        self.history.last()
    }
}

/// Model, optimizer state, and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model<f32>,
    opt: OptState<f32>,
    cfg: TrainConfig,
    rng: Rng,
    iter: u64,
    best_val_loss: f64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.block_size != cfg.block_size {
            return Err(Error::config(
                "block_size",
                format!(
                    "training block size {} differs from the model's {}",
                    cfg.block_size, model_cfg.block_size
                ),
            ));
        }
        let rng = seed_all(cfg.seed);
        let model = Model::init(model_cfg, &rng)?;
        let opt = OptState::for_model(&model);
        Ok(Self {
            model,
            opt,
            cfg,
            rng,
            iter: 0,
            best_val_loss: f64::INFINITY,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.train.validate()?;
        Ok(Self {
            rng: seed_all(ck.config.train.seed),
            model: ck.model,
            opt: ck.opt,
            cfg: ck.config.train,
            iter: ck.iter,
            best_val_loss: ck.best_val_loss,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: CheckpointConfig {
                model: self.model.config().clone(),
                train: self.cfg.clone(),
            },
            iter: self.iter,
            best_val_loss: self.best_val_loss,
            model: self.model.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// Dataset view using this run's block and batch sizes.
    fn sized(&self, dataset: &TaskDataset) -> Result<TaskDataset> {
        if dataset.vocab.len() != self.model.config().vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "model has {} but the `{}` corpus has {} characters",
                    self.model.config().vocab_size,
                    dataset.name,
                    dataset.vocab.len()
                ),
            ));
        }
        let mut ds = dataset.clone();
        ds.block_size = self.cfg.block_size;
        ds.batch_size = self.cfg.batch_size;
        Ok(ds)
    }

    /// One step: sample, forward, backward, clip, update.
    pub fn step(&mut self, dataset: &TaskDataset, observer: &mut dyn Observer) -> Result<StepStats> {
        let ds = self.sized(dataset)?;
        self.step_sized(&ds, observer)
    }

    fn step_sized(&mut self, ds: &TaskDataset, observer: &mut dyn Observer) -> Result<StepStats> {
        let iter = self.iter;
        let lr = lr_at(iter, &self.cfg);
        let batch = sample_batch(ds, &mut self.rng.stream(&format!("batch/{iter}")))?;
        observer.on_batch(iter, &batch);

        let mut g = Graph::training(self.rng.stream(&format!("dropout/{iter}")));
        let (loss, fwd) = self.model.loss(&mut g, &batch.x, &batch.y)?;
        let loss_value = g.value(loss).item().map(f32::as_f64).unwrap_or(f64::NAN);
        g.backward(loss)?;
        let mut grads: Vec<Vec<f32>> = fwd.params.iter().map(|&v| g.take_grad(v)).collect();
        drop(g);
        let clip = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if !loss_value.is_finite() || !clip.norm.is_finite() {
            return Err(Error::Diverged {
                iter,
                lr,
                grad_norm: clip.norm,
            });
        }
        adamw_step(self.model.params_mut(), &grads, &mut self.opt, lr, &self.cfg)?;
        self.iter += 1;
        let stats = StepStats {
            iter: self.iter,
            loss: loss_value,
            lr,
            grad_norm: clip.norm,
        };
        observer.on_step(&stats);
        Ok(stats)
    }

    /// Evaluation at the current iteration.
    pub fn evaluate(&self, dataset: &TaskDataset, opts: &EvalOptions) -> Result<EvalReport> {
        let ds = self.sized(dataset)?;
        self.evaluate_sized(&ds, opts)
    }

    fn evaluate_sized(&self, ds: &TaskDataset, opts: &EvalOptions) -> Result<EvalReport> {
        let val_loss = estimate_loss(&self.model, ds, Split::Val, self.cfg.eval_iters, &self.rng, self.iter)?;
        let tallies = eval_records(&self.model, &ds.vocab, &ds.eval_records, opts, &self.rng)?;
        let lr = lr_at(self.iter.saturating_sub(1), &self.cfg);
        Ok(EvalReport::from_tallies(self.iter, tallies, val_loss, lr))
    }

    /// Trains to `max_iters`, evaluating every `eval_interval` steps and at
    /// the last step.
    pub fn run(&mut self, dataset: &TaskDataset, opts: &RunOptions, observer: &mut dyn Observer) -> Result<RunState> {
        let ds = self.sized(dataset)?;
        let mut state = RunState::new(self.iter, self.best_val_loss);
        while self.iter < self.cfg.max_iters {
            self.step_sized(&ds, observer)?;
            if !self.iter.is_multiple_of(self.cfg.eval_interval) && self.iter != self.cfg.max_iters {
                continue;
            }
            let report = self.evaluate_sized(&ds, &opts.eval)?;
            if report.val_loss < self.best_val_loss {
                self.best_val_loss = report.val_loss;
                if let Some(path) = &opts.checkpoint_path {
                    self.checkpoint().save(path)?;
                    state.checkpoint_path = Some(path.clone());
                }
            }
            if state.best_combined_score.is_none_or(|best| report.combined_score > best) {
                state.best_combined_score = Some(report.combined_score);
                state.best_combined_iter = Some(report.iter);
            }
            state.iter = self.iter;
            state.best_val_loss = self.best_val_loss;
            state.history.push(report);
            observer.on_report(state.history.last().expect("just pushed"), &state)?;
        }
        state.iter = self.iter;
        Ok(state)
    }
}

/// Fresh run of `model_cfg` on `dataset`.
pub fn train_run(
    model_cfg: &ModelConfig,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    opts: &RunOptions,
    observer: &mut dyn Observer,
) -> Result<RunState> {
    Trainer::new(model_cfg.clone(), cfg.clone())?.run(dataset, opts, observer)
}
