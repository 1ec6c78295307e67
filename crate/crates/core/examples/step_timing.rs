//! Times training steps and one evaluation pass for a model width and task.
//!
//! `cargo run --release --example step_timing -- 14 arithmetic 200`
//! (`mlt` in place of the width times the multi-layer model)

use std::time::Instant;

use caplab::data::TaskKind;
use caplab::eval::EvalOptions;
use caplab::model::ModelConfig;
use caplab::optim::TrainConfig;
use caplab::train::Trainer;

fn main() -> caplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let width = args.first().map(String::as_str).unwrap_or("14");
    let task: TaskKind = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(TaskKind::Arithmetic);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);

    let ds = task.dataset();
    let mcfg = match width {
        "mlt" => ModelConfig::multi_layer(ds.vocab.len(), ds.block_size),
        n => ModelConfig::n_family(n.parse().unwrap_or(14), ds.vocab.len(), ds.block_size),
    };
    let cfg = TrainConfig::new(1e-2, 1e-4, 0.0, ds.block_size, ds.batch_size);
    let mut t = Trainer::new(mcfg, cfg)?;

    let start = Instant::now();
    let mut loss = 0.0;
    for _ in 0..steps {
        loss = t.step(&ds, &mut ())?.loss;
    }
    let per_step = start.elapsed().as_secs_f64() / steps as f64;
    println!("{width} {task}: {:.2} ms/step, loss {loss:.4}", per_step * 1e3);

    let start = Instant::now();
    let report = t.evaluate(&ds, &EvalOptions::default())?;
    let eval = start.elapsed().as_secs_f64();
    println!("eval: {eval:.2} s, combined {:.3}", report.combined_score);
    let total = per_step * 30_000.0 + eval * 120.0;
    println!("projected 30k-iteration run: {:.1} min", total / 60.0);
    Ok(())
}
