//! Properties the acceptance suite also reports on, as runnable checks.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use caplab::checkpoint::{Checkpoint, CheckpointConfig};
use caplab::data::{default_holdout, gen_arithmetic, gen_capitals, gen_combined, sample_batch};
use caplab::eval::{eval_records, EvalOptions};
use caplab::model::{Model, ModelConfig, TokenBatch};
use caplab::optim::{OptState, TrainConfig};
use caplab::rng::Rng;
use caplab::tensor::{Graph, Tensor};

pub const CASES: u32 = 64;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        failure_persistence: None,
        ..Config::with_cases(CASES)
    })
}

pub fn small_model(n: usize, heads: usize, layers: usize, vocab: usize, block: usize) -> ModelConfig {
    ModelConfig {
        n_embd: n,
        n_layer: layers,
        n_head: heads,
        mlp_expansion: 2,
        block_size: block,
        vocab_size: vocab,
        dropout: 0.0,
        use_bias: false,
        tie_output_head: true,
    }
}

/// Softmax rows are probability distributions.
pub fn softmax_normalization() -> Result<(), String> {
    let strategy = (1usize..6, 1usize..9, any::<u64>(), 0.1f64..50.0);
    runner()
        .run(&strategy, |(rows, cols, seed, spread)| {
            let mut s = Rng::new(seed).stream("softmax");
            let data: Vec<f64> = (0..rows * cols).map(|_| spread * s.normal()).collect();
            let mut g = Graph::no_grad();
            let x = g.leaf(Tensor::new(&[rows, cols], data).unwrap());
            let y = g.softmax(x).unwrap();
            for row in g.value(y).data().chunks(cols) {
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Changing a token leaves the logits of every earlier position unchanged.
pub fn causality() -> Result<(), String> {
    let strategy = (
        any::<u64>(),
        proptest::collection::vec(0usize..7, 6),
        0usize..6,
        0usize..7,
        prop_oneof![Just(1usize), Just(2), Just(4)],
    );
    runner()
        .run(&strategy, |(seed, tokens, pos, replacement, heads)| {
            let cfg = small_model(8, heads, 2, 7, 6);
            let model = Model::<f64>::init(cfg, &Rng::new(seed)).unwrap();
            let a = model.logits(&TokenBatch::new(1, 6, tokens.clone()).unwrap()).unwrap();
            let mut changed = tokens.clone();
            changed[pos] = replacement;
            let b = model.logits(&TokenBatch::new(1, 6, changed).unwrap()).unwrap();
            let prefix = pos * 7;
            for (x, y) in a.data()[..prefix].iter().zip(&b.data()[..prefix]) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Serialize then parse reproduces every bit, and re-serializes identically.
pub fn checkpoint_round_trip() -> Result<(), String> {
    let strategy = (
        any::<u64>(),
        prop_oneof![Just(4usize), Just(8), Just(12)],
        1usize..3,
        any::<u64>(),
        any::<f64>(),
        0u64..1000,
    );
    runner()
        .run(&strategy, |(seed, n, layers, iter, best, step)| {
            let cfg = small_model(n, 2, layers, 11, 5);
            let model = Model::<f32>::init(cfg.clone(), &Rng::new(seed)).unwrap();
            let mut opt = OptState::for_model(&model);
            opt.step = step;
            let mut s = Rng::new(seed).stream("moments");
            for buf in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                buf.iter_mut().for_each(|x| *x = s.normal() as f32);
            }
            let ck = Checkpoint {
                config: CheckpointConfig {
                    model: cfg,
                    train: TrainConfig::new(1e-2, 1e-4, 0.0, 5, 4),
                },
                iter,
                best_val_loss: best,
                model,
                opt,
            };
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.iter, iter);
            prop_assert_eq!(back.best_val_loss.to_bits(), best.to_bits());
            for (p, q) in back.model.params().iter().zip(ck.model.params()) {
                prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Targets are inputs shifted by one, and both are windows of the corpus.
pub fn batch_shift() -> Result<(), String> {
    let corpora = [gen_arithmetic(&default_holdout()).unwrap(), gen_capitals(), gen_combined()];
    let strategy = (any::<u64>(), 0u64..100_000, 0usize..3);
    runner()
        .run(&strategy, |(seed, step, which)| {
            let ds = &corpora[which];
            let b = sample_batch(ds, &mut Rng::new(seed).stream(&format!("batch/{step}"))).unwrap();
            let corpus = ds.tokens();
            let t = ds.block_size;
            for i in 0..b.x.batch {
                let (x, y) = (b.x.row(i), b.y.row(i));
                prop_assert_eq!(&x[1..], &y[..t - 1]);
                let found = (0..corpus.len() - t).any(|o| &corpus[o..o + t] == x && &corpus[o + 1..o + t + 1] == y);
                prop_assert!(found);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Per-record results do not depend on the order records are evaluated in.
pub fn eval_order_invariance() -> Result<(), String> {
    let ds = gen_arithmetic(&default_holdout()).unwrap();
    let strategy = (any::<u64>(), any::<u64>(), proptest::collection::vec(0usize..200, 1..12));
    runner()
        .run(&strategy, |(seed, model_seed, pick)| {
            let model = Model::<f32>::init(ModelConfig::n_family(8, 17, 9), &Rng::new(model_seed)).unwrap();
            let records: Vec<_> = pick.iter().map(|&i| ds.eval_records[i].clone()).collect();
            let mut reversed = records.clone();
            reversed.reverse();
            let opts = EvalOptions {
                attempts: 4,
                ..EvalOptions::default()
            };
            let rng = Rng::new(seed);
            let a = eval_records(&model, &ds.vocab, &records, &opts, &rng).unwrap();
            let mut b = eval_records(&model, &ds.vocab, &reversed, &opts, &rng).unwrap();
            b.reverse();
            prop_assert_eq!(a, b);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every named property with its outcome.
pub fn all() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("softmax normalization", softmax_normalization()),
        ("causality", causality()),
        ("checkpoint round trip", checkpoint_round_trip()),
        ("batch shift", batch_shift()),
        ("evaluation order invariance", eval_order_invariance()),
    ]
}
