//! Executes a configured run and writes its artifacts.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fedaf::data::{load_idx, synth_split, LabeledDataset};
use fedaf::federation::comm;
use fedaf::partition::{dirichlet_partition, ClientShard};
use fedaf::{Federation, RunResult};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Source};
use crate::metrics::{round_rows, MetricsWriter};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONDENSED_DIR: &str = "condensed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub algorithm: u64,
    pub data: u64,
    pub partition: u64,
}

/// Everything `summary.json` holds. Wall-clock times are kept out of it so that
/// reruns are byte-identical; they go to `timing.csv` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub rounds: usize,
    pub final_accuracy: f32,
    pub best_accuracy: f32,
    pub best_round: usize,
    pub param_count: usize,
    pub upstream_bytes: usize,
    pub downstream_bytes: usize,
    pub total_bytes: usize,
    /// `total_bytes / 2^20`.
    pub total_mib: f64,
    /// `total_bytes / 10^6`.
    pub total_mb: f64,
    pub seeds: Seeds,
    pub config: RunConfig,
}

impl Summary {
    pub fn from_run(cfg: &RunConfig, result: &RunResult) -> Self {
        let upstream: usize = result.rounds.iter().flat_map(|r| r.upstream.iter()).sum();
        let downstream: usize = result.rounds.iter().flat_map(|r| r.downstream.iter()).sum();
        let total = upstream + downstream;
        let best_round = result
            .rounds
            .iter()
            .fold(None::<&fedaf::RoundRecord>, |best, r| match best {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
            .map_or(0, |r| r.round);
        Summary {
            algorithm: cfg.algorithm.name.name().to_string(),
            rounds: result.rounds.len(),
            final_accuracy: result.final_accuracy(),
            best_accuracy: result.best_accuracy(),
            best_round,
            param_count: result.params.param_count(),
            upstream_bytes: upstream,
            downstream_bytes: downstream,
            total_bytes: total,
            total_mib: comm::to_mib(total),
            total_mb: comm::to_mb(total),
            seeds: Seeds { algorithm: cfg.algorithm.seed, data: cfg.data_seed(), partition: cfg.partition_seed() },
            config: cfg.resolved(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Train and test sets named by the dataset block.
pub fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset.source {
        Source::Synth => {
            let s = &cfg.dataset.synth;
            Ok(synth_split(s.classes, s.per_class, s.test_per_class, s.image_side, s.noise_sigma, cfg.data_seed())?)
        }
        Source::Idx => {
            let idx = cfg.dataset.idx.as_ref().context("dataset.idx is required for idx sources")?;
            let train = load_idx(&idx.train_images, &idx.train_labels)
                .with_context(|| format!("loading {}", idx.train_images.display()))?;
            let test = load_idx(&idx.test_images, &idx.test_labels)
                .with_context(|| format!("loading {}", idx.test_images.display()))?;
            Ok((train, test))
        }
    }
}

pub fn partition(cfg: &RunConfig, train: &LabeledDataset) -> Result<Vec<ClientShard>> {
    Ok(dirichlet_partition(train, &cfg.partition_spec())?)
}

/// Runs the federation described by `cfg`, writing metrics after every round and
/// the summary (and optional condensed export) at the end.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (train, test) = load_data(cfg)?;
    let shards = partition(cfg, &train)?;
    let classes = train.classes().max(test.classes());
    let arch = cfg.architecture(train.image_shape(), classes);
    let mut fed = Federation::new(cfg.federation(), &arch, &train, &shards, &test)?;

    let mut metrics = MetricsWriter::create(out_dir)?;
    let mut timing = String::from("round,wall_seconds\n");
    let mut cumulative = 0usize;
    let result = fed.run_with(|rec| {
        cumulative += rec.total_bytes();
        timing.push_str(&format!("{},{:.3}\n", rec.round, rec.wall_seconds));
        metrics.push_round(round_rows(rec, cumulative)).map_err(|e| fedaf::Error::Io(e.to_string()))
    })?;
    fs::write(out_dir.join(TIMING_FILE), timing)?;

    if cfg.output.export_condensed {
        export_condensed(&fed, cfg, out_dir)?;
    }
    let summary = Summary::from_run(cfg, &result);
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    let tmp = out_dir.join("summary.json.tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, out_dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedMeta {
    pub client: usize,
    pub round: usize,
    pub ipc: usize,
    pub image_shape: (usize, usize, usize),
    /// Images per class, zero for classes the client does not own.
    pub class_counts: Vec<usize>,
    pub images_file: String,
    pub labels_file: String,
}

fn export_condensed(fed: &Federation, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let sets = fed.condensed();
    if sets.iter().all(Option::is_none) {
        eprintln!("note: {} produces no condensed data; nothing exported", cfg.algorithm.name.name());
        return Ok(());
    }
    let dir = out_dir.join(CONDENSED_DIR);
    fs::create_dir_all(&dir)?;
    for (client, set) in fed.clients().iter().zip(sets) {
        let Some(set) = set else { continue };
        let q = set.quantize();
        let ds = q.to_dataset()?;
        let stem = format!("client-{:03}", client.id);
        let images_file = format!("{stem}-images.idx");
        let labels_file = format!("{stem}-labels.idx");
        ds.write_idx(&dir.join(&images_file), &dir.join(&labels_file))?;
        let meta = CondensedMeta {
            client: client.id,
            round: fed.round(),
            ipc: cfg.algorithm.ipc,
            image_shape: q.image_shape,
            class_counts: (0..q.per_class.len()).map(|c| q.per_class[c].as_ref().map_or(0, |(n, _)| *n)).collect(),
            images_file,
            labels_file,
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
    }
    Ok(())
}

/// Per-client per-class sample counts as CSV: `client,class_0,…,class_{C-1},total`.
pub fn partition_table(shards: &[ClientShard], classes: usize) -> String {
    let mut out = String::from("client");
    for c in 0..classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push_str(",total\n");
    for s in shards {
        out.push_str(&s.id.to_string());
        for c in 0..classes {
            out.push_str(&format!(",{}", s.class_counts.get(c).copied().unwrap_or(0)));
        }
        out.push_str(&format!(",{}\n", s.len()));
    }
    out
}
