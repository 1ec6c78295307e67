//! AdamW with decoupled weight decay, global-norm clipping, and a
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_MAX_ITERS: u64 = 30_000;
pub const DEFAULT_LR_DECAY_ITERS: u64 = 25_000;
pub const DEFAULT_WARMUP_ITERS: u64 = 100;
pub const DEFAULT_EVAL_INTERVAL: u64 = 250;
pub const DEFAULT_EVAL_ITERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub min_lr: f64,
    pub max_iters: u64,
    pub lr_decay_iters: u64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub eval_interval: u64,
    /// Batches averaged per validation-loss estimate.
    pub eval_iters: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Default schedule and optimizer constants with the given endpoints.
    pub fn new(learning_rate: f64, min_lr: f64, weight_decay: f64, block_size: usize, batch_size: usize) -> Self {
        Self {
            learning_rate,
            min_lr,
            max_iters: DEFAULT_MAX_ITERS,
            lr_decay_iters: DEFAULT_LR_DECAY_ITERS,
            warmup_iters: DEFAULT_WARMUP_ITERS,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            grad_clip: 1.0,
            eval_interval: DEFAULT_EVAL_INTERVAL,
            eval_iters: DEFAULT_EVAL_ITERS,
            batch_size,
            block_size,
            seed: 1337,
        }
    }

    /// Checks value ranges. `lr_decay_iters` may exceed `max_iters`, in which
    /// case the run ends partway down the cosine.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a positive number, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("eps", self.eps)?;
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.learning_rate) {
            return Err(Error::config(
                "min_lr",
                format!("must lie in [0, learning_rate = {}], got {}", self.learning_rate, self.min_lr),
            ));
        }
        if self.warmup_iters >= self.lr_decay_iters {
            return Err(Error::config(
                "warmup_iters",
                format!(
                    "must be below lr_decay_iters = {}, got {}",
                    self.lr_decay_iters, self.warmup_iters
                ),
            ));
        }
        for (field, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", format!("must be non-negative, got {}", self.grad_clip)));
        }
        for (field, v) in [
            ("eval_interval", self.eval_interval as usize),
            ("eval_iters", self.eval_iters),
            ("batch_size", self.batch_size),
            ("block_size", self.block_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Learning rate for the step that follows `iter` completed steps.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let (lr, min_lr) = (cfg.learning_rate, cfg.min_lr);
    if iter < cfg.warmup_iters {
        return lr * (iter + 1) as f64 / (cfg.warmup_iters + 1) as f64;
    }
    if iter > cfg.lr_decay_iters {
        return min_lr;
    }
    let ratio = (iter - cfg.warmup_iters) as f64 / (cfg.lr_decay_iters - cfg.warmup_iters) as f64;
    let coeff = 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos());
    min_lr + coeff * (lr - min_lr)
}

/// Moment buffers plus the parameter partition they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<F: Float> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    names: Vec<String>,
    decay: Vec<bool>,
}

impl<F: Float> OptState<F> {
    /// Zeroed state for parameters of the given sizes. `decay[i]` selects
    /// which parameters receive weight decay.
    pub fn new(sizes: &[usize], names: Vec<String>, decay: Vec<bool>) -> Result<Self> {
        if names.len() != sizes.len() || decay.len() != sizes.len() {
            return Err(Error::Invalid(format!(
                "optimizer state: {} sizes, {} names, {} decay flags",
                sizes.len(),
                names.len(),
                decay.len()
            )));
        }
        Ok(Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            names,
            decay,
        })
    }

    pub fn for_model(model: &Model<F>) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
        let names = model.param_names().map(str::to_string).collect();
        Self::new(&sizes, names, model.decay_mask()).expect("model enumerations agree")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decay(&self) -> &[bool] {
        &self.decay
    }

    /// Replaces step and moments, checking sizes against the current ones.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Result<()> {
        let sizes_match = |bufs: &[Vec<F>]| {
            bufs.len() == self.m.len() && bufs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !sizes_match(&m) || !sizes_match(&v) {
            return Err(Error::Checkpoint("optimizer moments do not match the model".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// One bias-corrected Adam update with decoupled weight decay. All gradients
/// are checked before any parameter changes.
pub fn adamw_step<F: Float>(
    params: &mut [Tensor<F>],
    grads: &[Vec<F>],
    state: &mut OptState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Invalid(format!(
            "adamw: {} parameters, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adamw", &[p.shape(), &[g.len()], &[state.m[i].len()]]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: state.names[i].clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = F::from_f64(lr / bc1);
    let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (F::from_f64(1.0 - cfg.beta1), F::from_f64(1.0 - cfg.beta2));
    let eps = F::from_f64(cfg.eps);

    for (i, p) in params.iter_mut().enumerate() {
        let decay = if state.decay[i] {
            F::from_f64(1.0 - lr * cfg.weight_decay)
        } else {
            F::one()
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let denom = v.sqrt() * inv_sqrt_bc2 + eps;
            *w -= step_size * *m / denom;
        }
    }
    Ok(())
}

/// Outcome of [`clip_grad_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clip {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient.
    pub scale: f64,
}

pub fn global_norm<F: Float>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. A `max_norm` of zero disables clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Vec<F>], max_norm: f64) -> Clip {
    let norm = global_norm(grads);
    let mut scale = 1.0;
    if max_norm > 0.0 && norm > max_norm {
        scale = max_norm / norm;
        let s = F::from_f64(scale);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Clip { norm, scale }
}
