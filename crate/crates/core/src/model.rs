//! Decoder-only character transformer.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `x + mlp(ln(x))`), learned position
//! embeddings, exact GELU, and an output head tied to the token embedding by
//! default. The MLP hidden width is `mlp_expansion * n_embd`, which lets the
//! single-layer family shrink the feed-forward block to `n` units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Standard deviation of every weight matrix and embedding at init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_embd: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub mlp_expansion: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub use_bias: bool,
    pub tie_output_head: bool,
}

impl ModelConfig {
    /// Single-layer, single-head model with MLP expansion 1.
    pub fn n_family(n_embd: usize, vocab_size: usize, block_size: usize) -> Self {
        Self {
            n_embd,
            n_layer: 1,
            n_head: 1,
            mlp_expansion: 1,
            block_size,
            vocab_size,
            dropout: 0.0,
            use_bias: false,
            tie_output_head: true,
        }
    }

    /// Six layers, six heads, width 384, expansion 4.
    pub fn multi_layer(vocab_size: usize, block_size: usize) -> Self {
        Self {
            n_embd: 384,
            n_layer: 6,
            n_head: 6,
            mlp_expansion: 4,
            block_size,
            vocab_size,
            dropout: 0.2,
            use_bias: false,
            tie_output_head: true,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp_expansion * self.n_embd
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    /// Parameter count implied by this config, computed without
    /// allocating the model.
    pub fn param_count(&self, exclude_position_embedding: bool) -> usize {
        let layout = Layout::new(self);
        let total: usize = layout.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if exclude_position_embedding {
            total - self.block_size * self.n_embd
        } else {
            total
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_embd", self.n_embd),
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("mlp_expansion", self.mlp_expansion),
            ("block_size", self.block_size),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return Err(Error::config(
                "n_head",
                format!("must divide n_embd ({} % {} != 0)", self.n_embd, self.n_head),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Linear,
    qkv: Linear,
    attn_proj: Linear,
    ln2: Linear,
    fc: Linear,
    mlp_proj: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    wte: usize,
    wpe: usize,
    blocks: Vec<Block>,
    ln_f: Linear,
    head: Option<usize>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let (n, h) = (cfg.n_embd, cfg.hidden_width());
        let residual_std = INIT_STD / (2.0 * cfg.n_layer as f64).sqrt();

        let wte = add("wte".into(), vec![cfg.vocab_size, n], Init::Normal(INIT_STD));
        let wpe = add("wpe".into(), vec![cfg.block_size, n], Init::Normal(INIT_STD));
        let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: String| Linear {
            weight: add(format!("{name}.weight"), vec![n], Init::Ones),
            bias: cfg
                .use_bias
                .then(|| add(format!("{name}.bias"), vec![n], Init::Zeros)),
        };
        let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                          name: String,
                          fan_in: usize,
                          fan_out: usize,
                          std: f64| Linear {
            weight: add(format!("{name}.weight"), vec![fan_in, fan_out], Init::Normal(std)),
            bias: cfg
                .use_bias
                .then(|| add(format!("{name}.bias"), vec![fan_out], Init::Zeros)),
        };

        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for i in 0..cfg.n_layer {
            blocks.push(Block {
                ln1: norm(&mut add, format!("h.{i}.ln_1")),
                qkv: linear(&mut add, format!("h.{i}.attn.c_attn"), n, 3 * n, INIT_STD),
                attn_proj: linear(&mut add, format!("h.{i}.attn.c_proj"), n, n, residual_std),
                ln2: norm(&mut add, format!("h.{i}.ln_2")),
                fc: linear(&mut add, format!("h.{i}.mlp.c_fc"), n, h, INIT_STD),
                mlp_proj: linear(&mut add, format!("h.{i}.mlp.c_proj"), h, n, residual_std),
            });
        }
        let ln_f = norm(&mut add, "ln_f".into());
        let head = (!cfg.tie_output_head)
            .then(|| add("lm_head.weight".into(), vec![cfg.vocab_size, n], Init::Normal(INIT_STD)));
        Self {
            specs,
            wte,
            wpe,
            blocks,
            ln_f,
            head,
        }
    }
}

/// Row-major `[batch, time]` grid of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub time: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, time: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || time == 0 || ids.len() != batch * time {
            return Err(Error::shape("tokens", &[&[batch, time], &[ids.len()]]));
        }
        Ok(Self { batch, time, ids })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.time..(i + 1) * self.time]
    }
}

/// How the next token is chosen during generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Argmax; the zero-temperature limit.
    Greedy,
    Temperature(f64),
}

#[derive(Clone, Debug)]
pub struct Model<F: Float> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<F>>,
}

impl<F: Float> PartialEq for Model<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Result of a forward pass: the logits node plus the graph leaves holding
/// each parameter, in enumeration order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl<F: Float> Model<F> {
    /// Fresh parameters drawn from the `"init"` stream of `rng`.
    pub fn init(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut stream = rng.stream("init");
        let params = layout
            .specs
            .iter()
            .map(|spec| {
                let len: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Normal(std) => (0..len).map(|_| F::from_f64(std * stream.normal())).collect(),
                    Init::Ones => vec![F::one(); len],
                    Init::Zeros => vec![F::zero(); len],
                };
                Tensor::new(&spec.shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from parameter tensors in enumeration order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::shape("from_params", &[&spec.shape, p.shape()]));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    /// Weight-decay group membership: every parameter of rank >= 2
    /// (matrices and embeddings) decays; norm gains and biases do not.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.rank() >= 2).collect()
    }

    pub fn token_embedding(&self) -> &Tensor<F> {
        &self.params[self.layout.wte]
    }

    pub fn position_embedding(&self) -> &Tensor<F> {
        &self.params[self.layout.wpe]
    }

    /// The `[V, n]` matrix projecting hidden states to logits. With a tied
    /// head this is the token embedding itself.
    pub fn output_head(&self) -> &Tensor<F> {
        &self.params[self.layout.head.unwrap_or(self.layout.wte)]
    }

    pub fn count_params(&self, exclude_position_embedding: bool) -> usize {
        let total: usize = self.params.iter().map(Tensor::len).sum();
        if exclude_position_embedding {
            total - self.position_embedding().len()
        } else {
            total
        }
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Next-token logits `[B, T, V]` for every position.
    pub fn forward(&self, g: &mut Graph<F>, tokens: &TokenBatch) -> Result<Forward> {
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let logits = self.forward_with(g, &params, tokens)?;
        Ok(Forward { logits, params })
    }

    /// Forward pass reading parameters from existing graph nodes, given in
    /// enumeration order with the same shapes as [`Model::params`].
    pub fn forward_with(&self, g: &mut Graph<F>, params: &[Var], tokens: &TokenBatch) -> Result<Var> {
        let cfg = &self.config;
        let (b, t) = (tokens.batch, tokens.time);
        if params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "forward: expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if t > cfg.block_size {
            return Err(Error::Invalid(format!(
                "sequence length {t} exceeds block size {}",
                cfg.block_size
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::OutOfRange {
                op: "forward",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        for (v, p) in params.iter().zip(&self.params) {
            if g.shape(*v) != p.shape() {
                return Err(Error::shape("forward", &[g.shape(*v), p.shape()]));
            }
        }
        let lo = &self.layout;
        let p = |i: usize| params[i];
        let opt = |i: Option<usize>| i.map(|i| params[i]);

        let tok = g.embedding(p(lo.wte), &tokens.ids, &[b, t])?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.embedding(p(lo.wpe), &positions, &[t])?;
        let mut x = g.add(tok, pos)?;
        x = g.dropout(x, cfg.dropout)?;

        let scale = F::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
        for blk in &lo.blocks {
            let h = g.layernorm(x, p(blk.ln1.weight), opt(blk.ln1.bias))?;
            let qkv = linear(g, h, p(blk.qkv.weight), opt(blk.qkv.bias))?;
            let q = g.split_heads(qkv, 0, 3, cfg.n_head)?;
            let k = g.split_heads(qkv, 1, 3, cfg.n_head)?;
            let v = g.split_heads(qkv, 2, 3, cfg.n_head)?;
            let att = g.matmul_t(q, k)?;
            let att = g.scale(att, scale);
            let att = g.causal_mask(att)?;
            let att = g.softmax(att)?;
            let att = g.dropout(att, cfg.dropout)?;
            let y = g.matmul(att, v)?;
            let y = g.merge_heads(y)?;
            let y = linear(g, y, p(blk.attn_proj.weight), opt(blk.attn_proj.bias))?;
            let y = g.dropout(y, cfg.dropout)?;
            x = g.add(x, y)?;

            let h = g.layernorm(x, p(blk.ln2.weight), opt(blk.ln2.bias))?;
            let h = linear(g, h, p(blk.fc.weight), opt(blk.fc.bias))?;
            let h = g.gelu(h);
            let h = linear(g, h, p(blk.mlp_proj.weight), opt(blk.mlp_proj.bias))?;
            let h = g.dropout(h, cfg.dropout)?;
            x = g.add(x, h)?;
        }
        let x = g.layernorm(x, p(lo.ln_f.weight), opt(lo.ln_f.bias))?;
        let head = p(lo.head.unwrap_or(lo.wte));
        g.matmul_t(x, head)
    }

    /// Mean cross-entropy of `targets` under the model's predictions.
    pub fn loss(&self, g: &mut Graph<F>, tokens: &TokenBatch, targets: &TokenBatch) -> Result<(Var, Forward)> {
        if tokens.batch != targets.batch || tokens.time != targets.time {
            return Err(Error::shape(
                "loss",
                &[&[tokens.batch, tokens.time], &[targets.batch, targets.time]],
            ));
        }
        let fwd = self.forward(g, tokens)?;
        let loss = g.cross_entropy(fwd.logits, &targets.ids)?;
        Ok((loss, fwd))
    }

    /// Loss value in evaluation mode without recording a graph.
    pub fn eval_loss(&self, tokens: &TokenBatch, targets: &TokenBatch) -> Result<f64> {
        let mut g = Graph::no_grad();
        let (loss, _) = self.loss(&mut g, tokens, targets)?;
        Ok(g.value(loss).item().map(F::as_f64).unwrap_or(f64::NAN))
    }

    /// Logits in evaluation mode without recording a graph.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad();
        let fwd = self.forward(&mut g, tokens)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Autoregressive continuation of `prompt`, stopping after a token in
    /// `stop` (which is kept) or after `max_new` tokens.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        sampling: Sampling,
        rng: &mut Stream,
        stop: &[usize],
    ) -> Result<Vec<usize>> {
        let mut out = self.generate_batch(prompt, max_new, sampling, std::slice::from_mut(rng), stop)?;
        Ok(out.pop().unwrap_or_default())
    }

    /// Runs one continuation of `prompt` per stream in lockstep. Sequence `i`
    /// draws only from `rngs[i]`.
    pub fn generate_batch(
        &self,
        prompt: &[usize],
        max_new: usize,
        sampling: Sampling,
        rngs: &mut [Stream],
        stop: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        if prompt.is_empty() {
            return Err(Error::Invalid("generate: empty prompt".into()));
        }
        if let Sampling::Temperature(temp) = sampling {
            if !(temp > 0.0 && temp.is_finite()) {
                return Err(Error::Invalid(format!("generate: temperature {temp} must be > 0")));
            }
        }
        let n = rngs.len();
        let mut contexts: Vec<Vec<usize>> = vec![prompt.to_vec(); n];
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        let vocab = self.config.vocab_size;

        for _ in 0..max_new {
            if active.is_empty() {
                break;
            }
            let len = contexts[active[0]].len();
            let window = len.min(self.config.block_size);
            let mut ids = Vec::with_capacity(active.len() * window);
            for &i in &active {
                ids.extend_from_slice(&contexts[i][len - window..]);
            }
            let tokens = TokenBatch::new(active.len(), window, ids)?;
            let logits = self.logits(&tokens)?;
            let ld = logits.data();
            let mut still = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let start = (row * window + window - 1) * vocab;
                let next = pick(&ld[start..start + vocab], sampling, &mut rngs[i]);
                contexts[i].push(next);
                outputs[i].push(next);
                if !stop.contains(&next) {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }
}

fn linear<F: Float>(g: &mut Graph<F>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

fn pick<F: Float>(logits: &[F], sampling: Sampling, rng: &mut Stream) -> usize {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Temperature(temp) => {
            let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temp).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.uniform() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.len() - 1
        }
    }
}

/// Closed-form count under the reporting convention (tied head, no biases,
/// position embedding excluded): `V n + L (4 n^2 + 2 m n^2 + 2 n) + n`.
pub fn reported_param_count(n_embd: usize, n_layer: usize, mlp_expansion: usize, vocab_size: usize) -> usize {
    let n = n_embd;
    vocab_size * n + n_layer * (4 * n * n + 2 * mlp_expansion * n * n + 2 * n) + n
}

/// Formats a parameter count the way the result tables print it:
/// two decimals with a `k` or `M` suffix.
pub fn format_param_count(count: usize) -> String {
    let c = count as f64;
    if c >= 1e6 {
        format!("{:.2}M", c / 1e6)
    } else if c >= 1e3 {
        format!("{:.2}k", c / 1e3)
    } else {
        count.to_string()
    }
}
