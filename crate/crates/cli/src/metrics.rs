//! Long-format per-round metrics: `round,metric,client,value`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedaf::RoundRecord;
use serde::{Deserialize, Serialize};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub metric: String,
    /// Empty for federation-wide metrics.
    pub client: Option<usize>,
    pub value: f64,
}

impl MetricRow {
    fn global(round: usize, metric: &str, value: f64) -> Self {
        MetricRow { round, metric: metric.into(), client: None, value }
    }

    fn client(round: usize, metric: &str, client: usize, value: f64) -> Self {
        MetricRow { round, metric: metric.into(), client: Some(client), value }
    }
}

/// Rows for one round. `cumulative_bytes` includes this round.
pub fn round_rows(rec: &RoundRecord, cumulative_bytes: usize) -> Vec<MetricRow> {
    let r = rec.round;
    let mut rows = vec![MetricRow::global(r, "accuracy", rec.accuracy as f64)];
    if let Some(l) = rec.server_loss {
        rows.push(MetricRow::global(r, "server_loss", l as f64));
    }
    rows.push(MetricRow::global(r, "round_bytes", rec.total_bytes() as f64));
    rows.push(MetricRow::global(r, "cumulative_bytes", cumulative_bytes as f64));
    for (k, &b) in rec.upstream.iter().enumerate() {
        rows.push(MetricRow::client(r, "upstream_bytes", k, b as f64));
    }
    for (k, &b) in rec.downstream.iter().enumerate() {
        rows.push(MetricRow::client(r, "downstream_bytes", k, b as f64));
    }
    for (k, &l) in rec.client_loss.iter().enumerate() {
        rows.push(MetricRow::client(r, "client_loss", k, l as f64));
    }
    rows
}

/// Keeps all rows in memory and rewrites the file after each round through a
/// temporary file and a rename, so readers never see a partial round.
pub struct MetricsWriter {
    path: PathBuf,
    rows: Vec<MetricRow>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let w = MetricsWriter { path: dir.join(METRICS_FILE), rows: Vec::new() };
        w.flush()?;
        Ok(w)
    }

    pub fn push_round(&mut self, rows: Vec<MetricRow>) -> Result<()> {
        if let (Some(last), Some(first)) = (self.rows.last(), rows.first()) {
            anyhow::ensure!(first.round >= last.round, "metric rounds must not decrease");
        }
        self.rows.extend(rows);
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let tmp = self.path.with_extension("csv.tmp");
        write_metrics(&tmp, &self.rows)?;
        fs::rename(&tmp, &self.path).with_context(|| format!("replacing {}", self.path.display()))
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["round", "metric", "client", "value"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| row.with_context(|| format!("parsing {}", path.display()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RoundRecord {
            round: 1,
            accuracy: 0.9633333,
            upstream: vec![10, 20],
            downstream: vec![5, 5],
            client_loss: vec![0.25, 1.0 / 3.0],
            server_loss: Some(0.1),
            wall_seconds: 0.0,
        };
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        assert!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
        let rows = round_rows(&rec, 40);
        w.push_round(rows.clone()).unwrap();
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), rows);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(text.starts_with("round,metric,client,value\n1,accuracy,,"));
    }
}
