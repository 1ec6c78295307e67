use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use caplab::data::TaskKind;
use caplab::eval::EvalReport;
use caplab::experiments::{self, ExperimentPreset};
use caplab::train::{Observer, RunState};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "CAPLAB_OUT";

#[derive(Parser)]
#[command(name = "caplab", version, about = "Train small character transformers on arithmetic and capital-city tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset or config file into a run directory.
    Run {
        /// Named preset (see `list-presets`).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        /// Flat TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory [default: $CAPLAB_OUT/<id>, with CAPLAB_OUT defaulting to `runs`].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing run in the output directory.
        #[arg(long)]
        force: bool,
        /// Evaluate with argmax decoding instead of sampling.
        #[arg(long)]
        greedy_eval: bool,
        /// Override the iteration budget.
        #[arg(long)]
        max_iters: Option<u64>,
        /// Suppress per-evaluation progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Render result tables and accuracy series from run directories.
    Report {
        /// Completed run directories.
        dirs: Vec<PathBuf>,
        /// Where to write report.md, series/ and plots/ [default: $CAPLAB_OUT/report].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit SVG accuracy plots.
        #[arg(long)]
        svg: bool,
    },
    /// List the named presets.
    ListPresets {
        /// Print one preset as a config file instead.
        #[arg(long)]
        show: Option<String>,
    },
    /// Write the generated corpora and their evaluation prompts.
    GenData {
        /// arithmetic, facts, combined, or all.
        #[arg(long, default_value = "all")]
        task: String,
        /// Output directory [default: $CAPLAB_OUT/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

struct Progress {
    start: Instant,
    quiet: bool,
}

impl Observer for Progress {
    fn on_report(&mut self, r: &EvalReport, state: &RunState) -> caplab::Result<()> {
        if self.quiet {
            return Ok(());
        }
        let pct = |v: Option<f64>| v.map(|a| format!("{:5.1}%", 100.0 * a)).unwrap_or_else(|| "    -".into());
        let holdout = r
            .holdout_correct
            .map(|h| format!("{h:>2}/{}", r.holdout_total()))
            .unwrap_or_else(|| "-".into());
        eprintln!(
            "iter {:>7}  val {:.4}  add {}  sub {}  facts {}  (5,7) {}  best {:.1}% @{}  [{:.0}s]",
            r.iter,
            r.val_loss,
            pct(r.addition_acc),
            pct(r.subtraction_acc),
            pct(r.facts_acc),
            holdout,
            100.0 * state.best_combined_score.unwrap_or(0.0),
            state.best_combined_iter.unwrap_or(0),
            self.start.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    preset: Option<String>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    force: bool,
    greedy_eval: bool,
    max_iters: Option<u64>,
    quiet: bool,
) -> anyhow::Result<()> {
    let mut p = match (preset, config) {
        (Some(id), _) => experiments::preset(&id)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentPreset::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, None) => bail!("pass --preset or --config"),
    };
    if let Some(seed) = seed {
        p.train.seed = seed;
    }
    if let Some(n) = max_iters {
        p.train.max_iters = n;
    }
    p.greedy_eval |= greedy_eval;
    let dir = out.unwrap_or_else(|| {
        let name = match seed {
            Some(s) => format!("{}-seed{s}", p.id),
            None => p.id.clone(),
        };
        out_root().join(name)
    });
    if !quiet {
        eprintln!("run {} -> {}", p.id, dir.display());
    }
    let mut progress = Progress {
        start: Instant::now(),
        quiet,
    };
    experiments::run_experiment(&p, &dir, force, &mut progress)?;
    print!("{}", std::fs::read_to_string(dir.join(experiments::runner::SUMMARY_FILE))?);
    Ok(())
}

fn report(dirs: Vec<PathBuf>, out: Option<PathBuf>, svg: bool) -> anyhow::Result<()> {
    let rep = experiments::report(&dirs, svg)?;
    let out = out.unwrap_or_else(|| out_root().join("report"));
    let written = rep.write(&out)?;
    print!("{}", rep.markdown);
    eprintln!("wrote {} files under {}", written.len(), out.display());
    Ok(())
}

fn list_presets(show: Option<String>) -> anyhow::Result<()> {
    if let Some(id) = show {
        print!("{}", experiments::preset(&id)?.to_toml()?);
        return Ok(());
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<26} {:<11} {:<6} {:<11} {:>10} {:>9}", "id", "task", "model", "regularize", "parameters", "iters")?;
    for p in experiments::presets() {
        writeln!(
            stdout,
            "{:<26} {:<11} {:<6} {:<11} {:>10} {:>9}",
            p.id,
            p.task.as_str(),
            p.model_label(),
            p.regularization.as_str(),
            caplab::model::format_param_count(p.model.param_count(true)),
            p.train.max_iters
        )?;
    }
    Ok(())
}

fn gen_data(task: &str, out: Option<PathBuf>) -> anyhow::Result<()> {
    let tasks: Vec<TaskKind> = if task == "all" {
        TaskKind::ALL.to_vec()
    } else {
        vec![task.parse()?]
    };
    let out = out.unwrap_or_else(|| out_root().join("data"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for t in tasks {
        let ds = t.dataset();
        let corpus = out.join(format!("{t}.txt"));
        ds.write_corpus(&corpus)?;
        let mut eval = String::from("prompt\texpected\ttask\tholdout\n");
        for r in &ds.eval_records {
            eval.push_str(&format!("{}\t{}\t{}\t{}\n", r.prompt, r.expected, r.task.as_str(), r.holdout));
        }
        std::fs::write(out.join(format!("{t}-eval.tsv")), eval)?;
        println!(
            "{t}: {} lines, {} characters, vocab {}, {} eval prompts",
            ds.lines().count(),
            ds.text.chars().count(),
            ds.vocab.len(),
            ds.eval_records.len()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            preset,
            config,
            out,
            seed,
            force,
            greedy_eval,
            max_iters,
            quiet,
        } => run(preset, config, out, seed, force, greedy_eval, max_iters, quiet),
        Command::Report { dirs, out, svg } => report(dirs, out, svg),
        Command::ListPresets { show } => list_presets(show),
        Command::GenData { task, out } => gen_data(&task, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
