//! Plot-ready CSV files derived from a finished run directory.
//!
//! Everything is written under `<run>/plots/seed-<s>/`:
//!
//! - `relative_<model>.csv` and `relative_ground_truth.csv`: `position,value,count`,
//!   one row per position, value divided by the first position.
//! - `gradient_trace.csv`: `model,step,gradient`, models in training order.
//! - `eps_grid_auc.csv`: `split,alpha,auc` for the weight grid on the fitting
//!   and test splits.
//!
//! Output depends only on `metrics.json` and `history.json`, so emitting twice
//! gives the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use posbias::eval::relative_curve;
use posbias::PositionCurve;

use crate::pipeline::{read_json, slug, RunHistory, RunMetrics, HISTORY_FILE, METRICS_FILE};

fn relative_csv(curve: &PositionCurve) -> anyhow::Result<String> {
    let rel = relative_curve(curve)?;
    let mut out = String::from("position,value,count\n");
    for (k, (v, c)) in rel.iter().zip(curve.counts()).enumerate() {
        writeln!(out, "{k},{v},{c}")?;
    }
    Ok(out)
}

fn write(path: PathBuf, text: String, written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

/// Writes the plot files for `run_dir` and returns their paths.
pub fn emit_plot_data(run_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let missing: Vec<&str> = [METRICS_FILE, HISTORY_FILE]
        .into_iter()
        .filter(|f| !run_dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        bail!(
            "{} is not a completed run; missing: {}",
            run_dir.display(),
            missing.join(", ")
        );
    }
    let metrics: RunMetrics = read_json(&run_dir.join(METRICS_FILE))?;
    let history: RunHistory = read_json(&run_dir.join(HISTORY_FILE))?;

    let mut written = Vec::new();
    for report in &metrics.seeds {
        let dir = run_dir.join("plots").join(format!("seed-{}", report.seed));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

        write(
            dir.join("relative_ground_truth.csv"),
            relative_csv(&report.ground_truth)?,
            &mut written,
        )?;
        for m in &report.models {
            write(
                dir.join(format!("relative_{}.csv", slug(&m.name))),
                relative_csv(&m.report.curve)?,
                &mut written,
            )?;
        }

        let mut trace = String::from("model,step,gradient\n");
        if let Some(h) = history.seeds.iter().find(|h| h.seed == report.seed) {
            for (name, th) in &h.models {
                for (step, g) in &th.gradient_trace {
                    writeln!(trace, "{name},{step},{g}")?;
                }
            }
        }
        write(dir.join("gradient_trace.csv"), trace, &mut written)?;

        let mut grid = String::from("split,alpha,auc\n");
        for (split, g) in [("eps_fit", &report.grid_eps_fit), ("test", &report.grid_test)] {
            for (alpha, auc) in g.iter().flat_map(|g| &g.grid) {
                writeln!(grid, "{split},{alpha},{auc}")?;
            }
        }
        write(dir.join("eps_grid_auc.csv"), grid, &mut written)?;
    }
    Ok(written)
}
