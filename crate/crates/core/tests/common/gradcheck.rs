//! Gradient checks shared by the gradcheck and acceptance targets.
//!
//! Reverse-mode gradients against central finite differences in f64.
//! Each primitive `P` is checked through the scalar `sum(c * P(x))` with a
//! fixed random `c`, so no coordinate has a structurally zero derivative,
//! at ten random points.

use caplab::model::{Model, ModelConfig, TokenBatch};
use caplab::rng::Rng;
use caplab::tensor::{gradcheck_many, Graph, Tensor, Var, DEFAULT_EPSILON};
use caplab::Result;

pub const TOL: f64 = 1e-4;
const POINTS: usize = 10;

fn random(shape: &[usize], label: &str) -> Tensor<f64> {
    let mut s = Rng::new(2024).stream(label);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| s.normal()).collect()).unwrap()
}

/// `sum(c * y)` with `c` drawn once per output shape.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let c = g.leaf(random(&shape, &format!("readout/{shape:?}")));
    let prod = g.mul(y, c)?;
    Ok(g.sum(prod))
}

/// Runs `f` at `POINTS` random draws of inputs with the given shapes and
/// returns the worst relative error, infinite if evaluation fails.
fn check<Fun>(shapes: &[&[usize]], label: &str, f: Fun) -> f64
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for k in 0..POINTS {
        let points: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random(s, &format!("{label}/{k}/{i}")))
            .collect();
        match gradcheck_many(|g, v| f(g, v).and_then(|y| readout(g, y)), &points, DEFAULT_EPSILON) {
            Ok(err) => worst = worst.max(err),
            Err(_) => return f64::INFINITY,
        }
    }
    worst
}

/// Worst relative error of every primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let ids = [0usize, 3, 3, 1, 4, 0];
    let targets = [1usize, 0, 4, 2, 2, 3];
    // Masked entries hold the most negative finite value; zero their
    // readout weight so the objective stays finite.
    let lower = Tensor::new(&[4, 4], (0..16).map(|i| f64::from(u8::from(i % 4 <= i / 4))).collect()).unwrap();
    vec![
        ("add", check(&[&[3, 4], &[3, 4]], "add", |g, v| g.add(v[0], v[1]))),
        ("add_broadcast", check(&[&[2, 3, 4], &[4]], "add_broadcast", |g, v| g.add(v[0], v[1]))),
        ("mul", check(&[&[3, 4], &[3, 4]], "mul", |g, v| g.mul(v[0], v[1]))),
        ("mul_broadcast", check(&[&[2, 3, 4], &[3, 4]], "mul_broadcast", |g, v| g.mul(v[0], v[1]))),
        ("scale", check(&[&[5]], "scale", |g, v| Ok(g.scale(v[0], -1.7)))),
        ("matmul_weight", check(&[&[2, 3, 4], &[4, 5]], "matmul_weight", |g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", check(&[&[2, 3, 3, 4], &[2, 3, 4, 2]], "matmul_batched", |g, v| g.matmul(v[0], v[1]))),
        ("matmul_t_weight", check(&[&[2, 3, 4], &[5, 4]], "matmul_t_weight", |g, v| g.matmul_t(v[0], v[1]))),
        ("matmul_t_batched", check(&[&[2, 2, 3, 4], &[2, 2, 3, 4]], "matmul_t_batched", |g, v| g.matmul_t(v[0], v[1]))),
        ("embedding", check(&[&[5, 3]], "embedding", |g, v| g.embedding(v[0], &ids, &[2, 3]))),
        ("layernorm_bias", check(&[&[2, 3, 6], &[6], &[6]], "layernorm_bias", |g, v| g.layernorm(v[0], v[1], Some(v[2])))),
        ("layernorm", check(&[&[4, 5], &[5]], "layernorm", |g, v| g.layernorm(v[0], v[1], None))),
        ("gelu", check(&[&[3, 7]], "gelu", |g, v| Ok(g.gelu(v[0])))),
        ("softmax", check(&[&[2, 3, 5]], "softmax", |g, v| g.softmax(v[0]))),
        ("causal_mask", check(&[&[2, 4, 4]], "causal_mask", |g, v| {
            let m = g.causal_mask(v[0])?;
            let keep = g.leaf(lower.clone());
            g.mul(m, keep)
        })),
        ("masked_softmax", check(&[&[2, 4, 4]], "masked_softmax", |g, v| {
            let m = g.causal_mask(v[0])?;
            g.softmax(m)
        })),
        ("split_heads", check(&[&[2, 3, 12]], "split_heads", |g, v| g.split_heads(v[0], 1, 3, 2))),
        ("merge_heads", check(&[&[2, 2, 3, 2]], "merge_heads", |g, v| g.merge_heads(v[0]))),
        ("cross_entropy", check(&[&[2, 3, 5]], "cross_entropy", |g, v| g.cross_entropy(v[0], &targets))),
        ("sum", check(&[&[2, 5]], "sum", |g, v| Ok(g.sum(v[0])))),
        ("dropout", dropout()),
    ]
}

/// Dropout needs a training graph, which the generic checker does not
/// build, so differences are taken by hand with the mask stream held fixed.
fn dropout() -> f64 {
    let run = |x: &Tensor<f64>, record: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::training(Rng::new(9).stream("dropout/0"));
        let v = g.leaf(x.clone());
        let y = g.dropout(v, 0.3).unwrap();
        let out = readout(&mut g, y).unwrap();
        let val = g.value(out).item().unwrap();
        if record {
            g.backward(out).unwrap();
            (val, Some(g.take_grad(v)))
        } else {
            (val, None)
        }
    };
    let mut worst = 0.0f64;
    for k in 0..POINTS {
        let x = random(&[4, 6], &format!("dropout/{k}"));
        let (_, grad) = run(&x, true);
        let grad = grad.unwrap();
        for (j, &a) in grad.iter().enumerate() {
            let mut p = x.clone();
            p.data_mut()[j] += DEFAULT_EPSILON;
            let mut m = x.clone();
            m.data_mut()[j] -= DEFAULT_EPSILON;
            let n = (run(&p, false).0 - run(&m, false).0) / (2.0 * DEFAULT_EPSILON);
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
        }
    }
    worst
}

fn tiny_config(use_bias: bool) -> ModelConfig {
    ModelConfig {
        n_embd: 4,
        n_layer: 1,
        n_head: 1,
        mlp_expansion: 1,
        block_size: 3,
        vocab_size: 5,
        dropout: 0.0,
        use_bias,
        tie_output_head: true,
    }
}

/// Worst relative error over every parameter of the tiny model.
pub fn model_error(use_bias: bool) -> f64 {
    let cfg = tiny_config(use_bias);
    let x = TokenBatch::new(2, 3, vec![0, 4, 2, 1, 1, 3]).unwrap();
    let y = TokenBatch::new(2, 3, vec![4, 2, 0, 1, 3, 3]).unwrap();
    let mut worst = 0.0f64;
    for k in 0..POINTS {
        let mut model = Model::<f64>::init(cfg.clone(), &Rng::new(k as u64)).unwrap();
        // Larger weights than the 0.02 init so every path carries signal.
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let r = random(p.shape(), &format!("model/{k}/{i}"));
            for (w, n) in p.data_mut().iter_mut().zip(r.data()) {
                *w += 0.5 * n;
            }
        }
        let names: Vec<String> = model.param_names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            let loss = |g: &mut Graph<f64>, vars: &[Var]| {
                // One parameter at a time so a failure names its tensor.
                let params: Vec<Var> = model
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == i { vars[0] } else { g.leaf(p.clone()) })
                    .collect();
                let logits = model.forward_with(g, &params, &x)?;
                g.cross_entropy(logits, &y.ids)
            };
            let point = std::slice::from_ref(&model.params()[i]);
            let err = if name.ends_with("c_attn.bias") {
                key_bias_aware(&loss, &point[0], cfg.n_embd)
            } else {
                gradcheck_many(loss, point, DEFAULT_EPSILON).unwrap_or(f64::INFINITY)
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// The key slice of the fused qkv bias shifts every attention score in a
/// row by the same amount, so its true gradient is exactly zero and a
/// relative error is meaningless there. Those coordinates must instead be
/// zero to within roundoff on both sides, else the error is infinite; the
/// rest use the relative error.
fn key_bias_aware<Fun>(loss: &Fun, point: &Tensor<f64>, n: usize) -> f64
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let value = |p: &Tensor<f64>| {
        let mut g = Graph::no_grad();
        let v = g.leaf(p.clone());
        let out = loss(&mut g, &[v]).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let v = g.leaf(point.clone());
    let out = loss(&mut g, &[v]).unwrap();
    g.backward(out).unwrap();
    let grad = g.take_grad(v);
    let mut worst = 0.0f64;
    for (j, &a) in grad.iter().enumerate() {
        let (mut plus, mut minus) = (point.clone(), point.clone());
        plus.data_mut()[j] += DEFAULT_EPSILON;
        minus.data_mut()[j] -= DEFAULT_EPSILON;
        let num = (value(&plus) - value(&minus)) / (2.0 * DEFAULT_EPSILON);
        if (n..2 * n).contains(&j) {
            if a.abs() >= 1e-12 || num.abs() >= 1e-8 {
                return f64::INFINITY;
            }
        } else {
            worst = worst.max((a - num).abs() / (a.abs() + num.abs()).max(1e-8));
        }
    }
    worst
}
