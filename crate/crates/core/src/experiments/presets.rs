//! Named experiment configurations and their flat-file form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, DEFAULT_ATTEMPTS};
use crate::model::{ModelConfig, Sampling};
use crate::optim::TrainConfig;

pub const GROKKING_ID: &str = "grokking-mlt";
pub const EXTENDED_RANGE_ID: &str = "extended-range-n14";
pub const DEFAULT_SEED: u64 = 1337;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularization {
    /// Per-family dropout and weight decay.
    Paper,
    /// Dropout 0.0 and weight decay 0.1 for every model.
    Controlled,
}

impl Regularization {
    pub const ALL: [Regularization; 2] = [Regularization::Paper, Regularization::Controlled];

    pub fn as_str(self) -> &'static str {
        match self {
            Regularization::Paper => "paper",
            Regularization::Controlled => "controlled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelSize {
    N14,
    N28,
    N56,
    Mlt,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::N14, ModelSize::N28, ModelSize::N56, ModelSize::Mlt];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelSize::N14 => "n14",
            ModelSize::N28 => "n28",
            ModelSize::N56 => "n56",
            ModelSize::Mlt => "mlt",
        }
    }

    pub fn model_config(self, vocab_size: usize, block_size: usize) -> ModelConfig {
        match self {
            ModelSize::N14 => ModelConfig::n_family(14, vocab_size, block_size),
            ModelSize::N28 => ModelConfig::n_family(28, vocab_size, block_size),
            ModelSize::N56 => ModelConfig::n_family(56, vocab_size, block_size),
            ModelSize::Mlt => ModelConfig::multi_layer(vocab_size, block_size),
        }
    }

    /// Learning-rate endpoints and regularization for the family.
    fn optimizer(self) -> (f64, f64, f64, f64) {
        match self {
            ModelSize::Mlt => (1e-5, 1e-6, 0.2, 0.1),
            _ => (1e-2, 1e-4, 0.0, 0.0),
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn task_prefix(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Arithmetic => "arith",
        TaskKind::Facts => "facts",
        TaskKind::Combined => "combined",
    }
}

/// A complete, runnable experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub id: String,
    pub task: TaskKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularization: Regularization,
    pub notes: String,
    pub eval_attempts: usize,
    pub greedy_eval: bool,
    /// Inclusive operand range of the post-training out-of-range probe.
    pub extended_range: Option<(u32, u32)>,
}

impl ExperimentPreset {
    pub fn grid(task: TaskKind, size: ModelSize, reg: Regularization) -> Self {
        let (vocab, block, batch) = task_shape(task);
        let (lr, min_lr, dropout, weight_decay) = size.optimizer();
        let mut model = size.model_config(vocab, block);
        let mut train = TrainConfig::new(lr, min_lr, weight_decay, block, batch);
        model.dropout = dropout;
        if reg == Regularization::Controlled {
            model.dropout = 0.0;
            train.weight_decay = 0.1;
        }
        train.seed = DEFAULT_SEED;
        Self {
            id: format!("{}-{}-{}", task_prefix(task), size, reg.as_str()),
            task,
            model,
            train,
            regularization: reg,
            notes: String::new(),
            eval_attempts: DEFAULT_ATTEMPTS,
            greedy_eval: false,
            extended_range: None,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            attempts: self.eval_attempts,
            sampling: if self.greedy_eval {
                Sampling::Greedy
            } else {
                Sampling::Temperature(1.0)
            },
        }
    }

    /// Short model label used in result tables.
    pub fn model_label(&self) -> String {
        model_label(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::config("id", format!("`{}` is not a usable run name", self.id)));
        }
        self.model.validate()?;
        self.train.validate()?;
        let (vocab, _, _) = task_shape(self.task);
        if self.model.vocab_size != vocab {
            return Err(Error::config(
                "vocab_size",
                format!("the {} corpus has {vocab} characters, got {}", self.task, self.model.vocab_size),
            ));
        }
        if self.model.block_size != self.train.block_size {
            return Err(Error::config(
                "block_size",
                "model and training block sizes must agree",
            ));
        }
        if self.eval_attempts == 0 {
            return Err(Error::config("eval_attempts", "must be at least 1"));
        }
        if let Some((lo, hi)) = self.extended_range {
            if lo > hi {
                return Err(Error::config("extended_range_hi", format!("must be >= extended_range_lo ({lo})")));
            }
            if self.task == TaskKind::Facts {
                return Err(Error::config("extended_range_lo", "the probe needs an arithmetic vocabulary"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&FlatConfig::from(self))?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let flat: FlatConfig = toml::from_str(text)?;
        let preset = Self::try_from(flat)?;
        preset.validate()?;
        Ok(preset)
    }
}

/// `(vocab_size, block_size, batch_size)` of a corpus.
pub fn task_shape(task: TaskKind) -> (usize, usize, usize) {
    let vocab = match task {
        TaskKind::Arithmetic => 17,
        TaskKind::Facts => 51,
        TaskKind::Combined => 66,
    };
    (vocab, task.block_size(), task.batch_size())
}

pub fn model_label(m: &ModelConfig) -> String {
    let mlt = ModelConfig::multi_layer(m.vocab_size, m.block_size);
    if m.n_layer == mlt.n_layer && m.n_head == mlt.n_head && m.n_embd == mlt.n_embd && m.mlp_expansion == mlt.mlp_expansion
    {
        "MLT".into()
    } else if m.n_layer == 1 && m.n_head == 1 && m.mlp_expansion == 1 {
        format!("n{}", m.n_embd)
    } else {
        format!("L{}H{}-n{}-m{}", m.n_layer, m.n_head, m.n_embd, m.mlp_expansion)
    }
}

/// Arithmetic-only MLT with the long, slow schedule.
pub fn grokking_preset() -> ExperimentPreset {
    let mut p = ExperimentPreset::grid(TaskKind::Arithmetic, ModelSize::Mlt, Regularization::Paper);
    p.id = GROKKING_ID.into();
    p.train.learning_rate = 1e-6;
    p.train.lr_decay_iters = 10_000_000;
    p.train.min_lr = 1e-7;
    p.train.max_iters = 1_500_000;
    p.notes = "long run probing for delayed generalization; not part of routine runs".into();
    p
}

/// n14 arithmetic followed by a 0..=19 operand probe.
pub fn extended_range_preset() -> ExperimentPreset {
    let mut p = ExperimentPreset::grid(TaskKind::Arithmetic, ModelSize::N14, Regularization::Paper);
    p.id = EXTENDED_RANGE_ID.into();
    p.extended_range = Some((0, 19));
    p.notes = "after training, evaluates operands in 0..=19 excluding single-digit pairs".into();
    p
}

/// Every named preset: the task x model x regularization grid, then the
/// two special runs.
pub fn presets() -> Vec<ExperimentPreset> {
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        for size in ModelSize::ALL {
            for reg in Regularization::ALL {
                out.push(ExperimentPreset::grid(task, size, reg));
            }
        }
    }
    out.push(grokking_preset());
    out.push(extended_range_preset());
    out
}

pub fn preset(id: &str) -> Result<ExperimentPreset> {
    presets()
        .into_iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::UnknownPreset(id.to_string()))
}

/// On-disk form: one flat table of typed keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    id: String,
    task: TaskKind,
    regularization: Regularization,
    #[serde(default)]
    notes: String,

    n_embd: usize,
    n_layer: usize,
    n_head: usize,
    mlp_expansion: usize,
    block_size: usize,
    vocab_size: usize,
    dropout: f64,
    use_bias: bool,
    tie_output_head: bool,

    learning_rate: f64,
    min_lr: f64,
    max_iters: u64,
    lr_decay_iters: u64,
    warmup_iters: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    grad_clip: f64,
    eval_interval: u64,
    eval_iters: usize,
    batch_size: usize,
    seed: u64,

    eval_attempts: usize,
    greedy_eval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extended_range_lo: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extended_range_hi: Option<u32>,
}

impl From<&ExperimentPreset> for FlatConfig {
    fn from(p: &ExperimentPreset) -> Self {
        let (m, t) = (&p.model, &p.train);
        Self {
            id: p.id.clone(),
            task: p.task,
            regularization: p.regularization,
            notes: p.notes.clone(),
            n_embd: m.n_embd,
            n_layer: m.n_layer,
            n_head: m.n_head,
            mlp_expansion: m.mlp_expansion,
            block_size: m.block_size,
            vocab_size: m.vocab_size,
            dropout: m.dropout,
            use_bias: m.use_bias,
            tie_output_head: m.tie_output_head,
            learning_rate: t.learning_rate,
            min_lr: t.min_lr,
            max_iters: t.max_iters,
            lr_decay_iters: t.lr_decay_iters,
            warmup_iters: t.warmup_iters,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            eval_interval: t.eval_interval,
            eval_iters: t.eval_iters,
            batch_size: t.batch_size,
            seed: t.seed,
            eval_attempts: p.eval_attempts,
            greedy_eval: p.greedy_eval,
            extended_range_lo: p.extended_range.map(|r| r.0),
            extended_range_hi: p.extended_range.map(|r| r.1),
        }
    }
}

impl TryFrom<FlatConfig> for ExperimentPreset {
    type Error = Error;

    fn try_from(f: FlatConfig) -> Result<Self> {
        let extended_range = match (f.extended_range_lo, f.extended_range_hi) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, Some(_)) => return Err(Error::config("extended_range_lo", "required with extended_range_hi")),
            (Some(_), None) => return Err(Error::config("extended_range_hi", "required with extended_range_lo")),
        };
        Ok(Self {
            id: f.id,
            task: f.task,
            model: ModelConfig {
                n_embd: f.n_embd,
                n_layer: f.n_layer,
                n_head: f.n_head,
                mlp_expansion: f.mlp_expansion,
                block_size: f.block_size,
                vocab_size: f.vocab_size,
                dropout: f.dropout,
                use_bias: f.use_bias,
                tie_output_head: f.tie_output_head,
            },
            train: TrainConfig {
                learning_rate: f.learning_rate,
                min_lr: f.min_lr,
                max_iters: f.max_iters,
                lr_decay_iters: f.lr_decay_iters,
                warmup_iters: f.warmup_iters,
                beta1: f.beta1,
                beta2: f.beta2,
                eps: f.eps,
                weight_decay: f.weight_decay,
                grad_clip: f.grad_clip,
                eval_interval: f.eval_interval,
                eval_iters: f.eval_iters,
                batch_size: f.batch_size,
                block_size: f.block_size,
                seed: f.seed,
            },
            regularization: f.regularization,
            notes: f.notes,
            eval_attempts: f.eval_attempts,
            greedy_eval: f.greedy_eval,
            extended_range,
        })
    }
}

impl FromStr for Regularization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Regularization::Paper),
            "controlled" => Ok(Regularization::Controlled),
            other => Err(Error::config("regularization", format!("unknown mode `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::TaskKind;

    #[test]
    fn grid_is_complete_and_unique() {
        let all = presets();
        assert_eq!(all.len(), 26);
        let ids: BTreeSet<_> = all.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids.len(), 26);
        for id in ["arith-n14-paper", "facts-mlt-controlled", "combined-n56-paper", GROKKING_ID, EXTENDED_RANGE_ID] {
            assert!(ids.contains(id), "{id}");
        }
        for p in &all {
            p.validate().unwrap();
        }
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn family_settings() {
        let n = preset("arith-n14-paper").unwrap();
        assert_eq!((n.train.learning_rate, n.train.min_lr), (1e-2, 1e-4));
        assert_eq!((n.model.dropout, n.train.weight_decay), (0.0, 0.0));
        assert_eq!((n.train.max_iters, n.train.lr_decay_iters, n.train.eval_interval), (30_000, 25_000, 250));
        assert_eq!(n.train.beta2, 0.99);
        assert_eq!((n.train.block_size, n.train.batch_size), (9, 882));
        let m = preset("facts-mlt-paper").unwrap();
        assert_eq!((m.train.learning_rate, m.train.min_lr), (1e-5, 1e-6));
        assert_eq!((m.model.dropout, m.train.weight_decay), (0.2, 0.1));
        assert_eq!((m.model.n_embd, m.model.n_layer, m.model.n_head, m.model.mlp_expansion), (384, 6, 6, 4));
        assert_eq!((m.train.block_size, m.train.batch_size), (24, 576));
        let c = preset("combined-n28-controlled").unwrap();
        assert_eq!((c.model.dropout, c.train.weight_decay), (0.0, 0.1));
    }

    #[test]
    fn controlled_differs_only_in_regularization() {
        for task in TaskKind::ALL {
            for size in ModelSize::ALL {
                let paper = FlatConfig::from(&ExperimentPreset::grid(task, size, Regularization::Paper));
                let ctrl = FlatConfig::from(&ExperimentPreset::grid(task, size, Regularization::Controlled));
                let (a, b) = (toml::Table::try_from(&paper).unwrap(), toml::Table::try_from(&ctrl).unwrap());
                let differing: BTreeSet<&str> =
                    a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.as_str()).collect();
                let allowed: BTreeSet<&str> = ["id", "regularization", "dropout", "weight_decay"].into();
                assert!(differing.is_subset(&allowed), "{task} {size}: {differing:?}");
                assert_eq!((ctrl.dropout, ctrl.weight_decay), (0.0, 0.1));
            }
        }
    }

    #[test]
    fn grokking_fields() {
        let g = grokking_preset();
        assert_eq!(g.train.learning_rate, 1e-6);
        assert_eq!(g.train.lr_decay_iters, 10_000_000);
        assert_eq!(g.train.min_lr, 1e-7);
        assert_eq!(g.train.max_iters, 1_500_000);
        assert_eq!(g.train.eval_interval, 250);
        assert_eq!(g.task, TaskKind::Arithmetic);
        assert_eq!(g.model_label(), "MLT");
        let mlt = preset("arith-mlt-paper").unwrap();
        assert_eq!(g.model, mlt.model);
    }

    #[test]
    fn toml_round_trip() {
        for p in presets() {
            let text = p.to_toml().unwrap();
            assert_eq!(ExperimentPreset::from_toml(&text).unwrap(), p, "{text}");
        }
    }

    #[test]
    fn config_errors_name_fields() {
        let text = preset("arith-n14-paper").unwrap().to_toml().unwrap();
        let bad = text.replace("n_head = 1", "n_head = 3");
        let err = ExperimentPreset::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("n_head"), "{err}");
        let bad = format!("{text}\nbogus = 1\n");
        assert!(ExperimentPreset::from_toml(&bad).unwrap_err().to_string().contains("bogus"));
        let bad = text.replace("vocab_size = 17", "vocab_size = 18");
        assert!(ExperimentPreset::from_toml(&bad).unwrap_err().to_string().contains("vocab_size"));
    }

    #[test]
    fn labels() {
        assert_eq!(preset("arith-n28-paper").unwrap().model_label(), "n28");
        assert_eq!(preset("facts-mlt-paper").unwrap().model_label(), "MLT");
    }
}
