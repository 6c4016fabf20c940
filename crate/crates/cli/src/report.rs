//! Seed-grouped comparison of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::metrics::{read_metrics, METRICS_FILE};
use crate::runner::Summary;

pub const REPORT_FILE: &str = "report.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// One loaded run directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub summary: Summary,
    /// `(round, accuracy)` in round order.
    pub curve: Vec<(usize, f64)>,
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let summary = Summary::read(dir)?;
    let curve = read_metrics(&dir.join(METRICS_FILE))?
        .into_iter()
        .filter(|r| r.metric == "accuracy" && r.client.is_none())
        .map(|r| (r.round, r.value))
        .collect();
    Ok(RunData { dir: dir.to_path_buf(), summary, curve })
}

/// Dataset and model settings that must agree across compared runs. Seeds and
/// `α` are allowed to differ.
fn compat_key(cfg: &RunConfig) -> String {
    let mut d = cfg.dataset.clone();
    d.synth.seed = None;
    d.partition.seed = None;
    d.partition.alpha = 0.0;
    format!("{:?}|{:?}", d, cfg.model)
}

/// `(mean, population std)`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub algorithm: String,
    pub alpha: f64,
    pub ipc: usize,
    pub runs: usize,
    pub final_mean: f64,
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
    pub total_bytes_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub algorithm: String,
    pub alpha: f64,
    pub ipc: usize,
    pub seed: u64,
    pub run: String,
    pub round: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupRow>,
    pub curves: Vec<CurveRow>,
}

/// Groups runs by `(algorithm, α, IPC)`; refuses runs over different datasets or models.
pub fn build(runs: &[RunData]) -> Result<Report> {
    let Some(first) = runs.first() else { bail!("no runs given") };
    let key = compat_key(&first.summary.config);
    for r in &runs[1..] {
        if compat_key(&r.summary.config) != key {
            bail!(
                "{} and {} use different dataset or model settings; refusing to compare them",
                first.dir.display(),
                r.dir.display()
            );
        }
    }
    let mut groups: BTreeMap<(String, String, usize), Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        let c = &r.summary.config;
        groups
            .entry((r.summary.algorithm.clone(), format!("{:e}", c.dataset.partition.alpha), c.algorithm.ipc))
            .or_default()
            .push(r);
    }
    let mut report = Report { groups: Vec::new(), curves: Vec::new() };
    for ((algorithm, _, ipc), members) in groups {
        let alpha = members[0].summary.config.dataset.partition.alpha;
        let finals: Vec<f64> = members.iter().map(|r| r.summary.final_accuracy as f64).collect();
        let bests: Vec<f64> = members.iter().map(|r| r.summary.best_accuracy as f64).collect();
        let bytes: Vec<f64> = members.iter().map(|r| r.summary.total_bytes as f64).collect();
        let (final_mean, final_std) = mean_std(&finals);
        let (best_mean, best_std) = mean_std(&bests);
        report.groups.push(GroupRow {
            algorithm: algorithm.clone(),
            alpha,
            ipc,
            runs: members.len(),
            final_mean,
            final_std,
            best_mean,
            best_std,
            total_bytes_mean: mean_std(&bytes).0,
        });
        for r in members {
            for &(round, accuracy) in &r.curve {
                report.curves.push(CurveRow {
                    algorithm: algorithm.clone(),
                    alpha,
                    ipc,
                    seed: r.summary.seeds.algorithm,
                    run: r.dir.display().to_string(),
                    round,
                    accuracy,
                });
            }
        }
    }
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.csv` and `curves.csv` into `out`.
pub fn write(report: &Report, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(REPORT_FILE), &report.groups)?;
    write_csv(&out.join(CURVES_FILE), &report.curves)
}

/// Human-readable table of the groups.
pub fn render(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>8} {:>5} {:>5}  {:>17}  {:>17}  {:>12}", "algorithm", "alpha", "ipc", "runs", "final acc", "best acc", "bytes");
    for g in &report.groups {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>5} {:>5}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}  {:>12.0}",
            g.algorithm, g.alpha, g.ipc, g.runs, g.final_mean, g.final_std, g.best_mean, g.best_std, g.total_bytes_mean
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.6, 0.7, 0.8]);
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 0.0816496580927726).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
