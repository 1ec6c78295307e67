//! Result tables and accuracy series from completed run directories.
//!
//! Everything here is derived from each run's `config.toml` and
//! `metrics.csv`, so the output is a pure function of those files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{self, MetricsRow};
use super::presets::{ExperimentPreset, Regularization};
use super::runner::{CONFIG_FILE, METRICS_FILE};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::format_param_count;

/// Reads one accuracy series from a metrics row.
type Accessor = fn(&MetricsRow) -> Option<f64>;

/// A run directory loaded for reporting.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub name: String,
    pub preset: ExperimentPreset,
    pub rows: Vec<MetricsRow>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let fail = |reason: String| Error::RunDir {
            path: dir.to_path_buf(),
            reason,
        };
        let config = std::fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| fail(format!("cannot read {CONFIG_FILE}: {e}")))?;
        let preset = ExperimentPreset::from_toml(&config)?;
        let metrics_text = std::fs::read_to_string(dir.join(METRICS_FILE))
            .map_err(|e| fail(format!("cannot read {METRICS_FILE}: {e}")))?;
        let rows = metrics::parse(&metrics_text)?;
        if rows.is_empty() {
            return Err(fail("run has no evaluations yet".into()));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| preset.id.clone());
        Ok(Self { name, preset, rows })
    }

    /// Row with the highest combined score, earliest on ties.
    pub fn best(&self) -> &MetricsRow {
        let mut best = &self.rows[0];
        for r in &self.rows[1..] {
            if r.combined > best.combined {
                best = r;
            }
        }
        best
    }

    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("non-empty metrics")
    }

    pub fn holdout_total(&self) -> usize {
        4 * self.preset.eval_attempts
    }

    /// Iterations at which both arithmetic accuracies are 100%.
    pub fn perfect_iters(&self) -> Vec<u64> {
        self.rows.iter().filter(|r| r.arithmetic_perfect()).map(|r| r.iter).collect()
    }
}

/// Rendered report plus per-run series files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub markdown: String,
    /// `(file name, contents)` pairs.
    pub series: Vec<(String, String)>,
    pub plots: Vec<(String, String)>,
}

impl Report {
    /// Writes `report.md`, `series/*.csv` and `plots/*.svg` under `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        std::fs::create_dir_all(out)?;
        let md = out.join("report.md");
        std::fs::write(&md, &self.markdown)?;
        written.push(md);
        for (sub, files) in [("series", &self.series), ("plots", &self.plots)] {
            if files.is_empty() {
                continue;
            }
            std::fs::create_dir_all(out.join(sub))?;
            for (name, text) in files {
                let path = out.join(sub).join(name);
                std::fs::write(&path, text)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.1}%", 100.0 * a)).unwrap_or_else(|| "-".into())
}

fn holdout(run: &RunRecord, row: &MetricsRow) -> String {
    row.holdout_correct
        .map(|h| format!("{h}/{}", run.holdout_total()))
        .unwrap_or_else(|| "-".into())
}

fn model_rank(label: &str) -> (usize, String) {
    let rank = match label {
        "n14" => 0,
        "n28" => 1,
        "n56" => 2,
        "MLT" => 3,
        _ => 4,
    };
    (rank, label.to_string())
}

fn task_title(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Arithmetic => "Addition and subtraction",
        TaskKind::Facts => "Capital cities",
        TaskKind::Combined => "Combined arithmetic and capital cities",
    }
}

fn table(out: &mut String, runs: &[&RunRecord], task: TaskKind, pick: fn(&RunRecord) -> &MetricsRow) {
    let header: &[&str] = match task {
        TaskKind::Arithmetic => &["Run", "Model", "Parameters", "Addition", "Subtraction", "(5,7)", "Iter"],
        TaskKind::Facts => &["Run", "Model", "Parameters", "Capital cities", "Iter"],
        TaskKind::Combined => &[
            "Run",
            "Model",
            "Parameters",
            "Addition",
            "Subtraction",
            "Capital cities",
            "(5,7)",
            "Combined",
            "Iter",
        ],
    };
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for run in runs {
        let row = pick(run);
        let label = run.preset.model_label();
        let params = format_param_count(run.preset.model.param_count(true));
        let cells: Vec<String> = match task {
            TaskKind::Arithmetic => vec![
                run.name.clone(),
                label,
                params,
                pct(row.addition_acc),
                pct(row.subtraction_acc),
                holdout(run, row),
                row.iter.to_string(),
            ],
            TaskKind::Facts => vec![run.name.clone(), label, params, pct(row.facts_acc), row.iter.to_string()],
            TaskKind::Combined => vec![
                run.name.clone(),
                label,
                params,
                pct(row.addition_acc),
                pct(row.subtraction_acc),
                pct(row.facts_acc),
                holdout(run, row),
                pct(Some(row.combined)),
                row.iter.to_string(),
            ],
        };
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out.push('\n');
}

fn series_csv(run: &RunRecord) -> String {
    let mut s = String::from("iter,addition_acc,subtraction_acc,facts_acc,both_arithmetic_perfect\n");
    let f = |v: Option<f64>| v.map(|a| format!("{a:.4}")).unwrap_or_default();
    for r in &run.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iter,
            f(r.addition_acc),
            f(r.subtraction_acc),
            f(r.facts_acc),
            u8::from(r.arithmetic_perfect())
        );
    }
    s
}

/// Accuracy-vs-iteration chart; red dots mark evaluations where both
/// arithmetic curves are at 100%.
pub fn series_svg(run: &RunRecord) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let max_iter = run.rows.iter().map(|r| r.iter).max().unwrap_or(1).max(1) as f64;
    let x = |it: u64| PAD + (W - 2.0 * PAD) * it as f64 / max_iter;
    let y = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, PAD, PAD - 12.0, run.name);
    let _ = writeln!(s, r#"<text x="4" y="{}">100%</text><text x="16" y="{}">0%</text>"#, y(1.0) + 4.0, y(0.0) + 4.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        W - PAD,
        H - PAD + 16.0,
        max_iter as u64
    );

    let curves: [(&str, &str, Accessor); 3] = [
        ("addition", "#1f77b4", |r| r.addition_acc),
        ("subtraction", "#ff7f0e", |r| r.subtraction_acc),
        ("capital cities", "#2ca02c", |r| r.facts_acc),
    ];
    let mut legend_y = PAD;
    for (name, color, get) in curves {
        let pts: Vec<String> = run
            .rows
            .iter()
            .filter_map(|r| get(r).map(|a| format!("{:.1},{:.1}", x(r.iter), y(a))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{legend_y}" fill="{color}">{name}</text>"#,
            W - PAD - 90.0
        );
        legend_y += 14.0;
    }
    for it in run.perfect_iters() {
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="red"/>"#, x(it), y(1.0));
    }
    s.push_str("</svg>\n");
    s
}

/// Builds the report for `dirs`. An empty list yields an empty report.
pub fn report(dirs: &[PathBuf], svg: bool) -> Result<Report> {
    let runs = dirs.iter().map(|d| RunRecord::load(d)).collect::<Result<Vec<_>>>()?;
    Ok(render(&runs, svg))
}

pub fn render(runs: &[RunRecord], svg: bool) -> Report {
    let mut rep = Report::default();
    if runs.is_empty() {
        return rep;
    }
    let md = &mut rep.markdown;
    md.push_str("# Results\n\n");
    for task in TaskKind::ALL {
        for reg in Regularization::ALL {
            let mut group: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.preset.task == task && r.preset.regularization == reg)
                .collect();
            if group.is_empty() {
                continue;
            }
            group.sort_by_key(|r| (model_rank(&r.preset.model_label()), r.name.clone()));
            let reg_name = match reg {
                Regularization::Paper => "per-family regularization",
                Regularization::Controlled => "controlled regularization",
            };
            let _ = writeln!(md, "## {} ({reg_name})\n", task_title(task));
            md.push_str("At the best combined score (earliest on ties):\n\n");
            table(md, &group, task, RunRecord::best);
            md.push_str("At the final evaluation:\n\n");
            table(md, &group, task, RunRecord::last);
        }
    }

    let arithmetic: Vec<&RunRecord> = runs.iter().filter(|r| r.preset.task != TaskKind::Facts).collect();
    if !arithmetic.is_empty() {
        md.push_str("## Evaluations with both arithmetic accuracies at 100%\n\n");
        md.push_str("| Run | Count | First | Last |\n|---|---|---|---|\n");
        for run in arithmetic {
            let it = run.perfect_iters();
            let show = |v: Option<&u64>| v.map(u64::to_string).unwrap_or_else(|| "-".into());
            let _ = writeln!(md, "| {} | {} | {} | {} |", run.name, it.len(), show(it.first()), show(it.last()));
        }
        md.push('\n');
    }

    for run in runs {
        rep.series.push((format!("{}.csv", run.name), series_csv(run)));
        if svg {
            rep.plots.push((format!("{}.svg", run.name), series_svg(run)));
        }
    }
    rep
}
