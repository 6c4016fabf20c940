//! Dirichlet label-skew partitioning of a dataset into client shards.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

/// Redraws attempted before an under-filled partition is repaired in place.
pub const MAX_REDRAWS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Dirichlet concentration; smaller means stronger label skew.
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
    /// Every client must end up with at least this many samples.
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
}

fn default_min_samples() -> usize {
    1
}

impl PartitionSpec {
    pub fn new(alpha: f64, clients: usize, seed: u64) -> Self {
        PartitionSpec { alpha, clients, seed, min_samples: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.clients == 0 {
            return Err(Error::InvalidArgument("need at least one client".into()));
        }
        Ok(())
    }
}

/// One client's view into the parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub id: usize,
    /// Ascending indices into the parent dataset.
    pub indices: Vec<usize>,
    /// `N_{k,c}` for every class.
    pub class_counts: Vec<usize>,
}

impl ClientShard {
    fn from_indices(id: usize, mut indices: Vec<usize>, ds: &LabeledDataset) -> Self {
        indices.sort_unstable();
        let mut class_counts = vec![0; ds.classes()];
        for &i in &indices {
            class_counts[ds.label(i)] += 1;
        }
        ClientShard { id, indices, class_counts }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn owns(&self, class: usize) -> bool {
        self.class_counts.get(class).is_some_and(|&n| n > 0)
    }

    pub fn owned_classes(&self) -> Vec<usize> {
        (0..self.class_counts.len()).filter(|&c| self.class_counts[c] > 0).collect()
    }

    /// Parent-dataset indices of this client's class-`c` samples.
    pub fn class_indices(&self, ds: &LabeledDataset, class: usize) -> Vec<usize> {
        self.indices.iter().copied().filter(|&i| ds.label(i) == class).collect()
    }
}

/// Splits every class's shuffled samples across clients by `p ~ Dir(α·1_K)`.
/// Partitions leaving a client below `min_samples` are redrawn with the next
/// sub-seed; after [`MAX_REDRAWS`] attempts the last draw is repaired by moving
/// samples from the largest shard.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let k = spec.clients;
    if ds.len() < k * spec.min_samples {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot give {k} clients {} each",
            ds.len(),
            spec.min_samples
        )));
    }
    let by_class = ds.class_indices();
    let mut assignment = Vec::new();
    for attempt in 0..MAX_REDRAWS {
        let mut rng = rng::stream(spec.seed, &[tag::PARTITION, attempt]);
        assignment = draw(&by_class, spec.alpha, k, &mut rng)?;
        if assignment.iter().all(|s| s.len() >= spec.min_samples) {
            break;
        }
    }
    repair(&mut assignment, spec.min_samples, ds);
    Ok(assignment.into_iter().enumerate().map(|(id, idx)| ClientShard::from_indices(id, idx, ds)).collect())
}

fn draw(by_class: &[Vec<usize>], alpha: f64, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut shards = vec![Vec::new(); k];
    for members in by_class {
        let mut idx = members.clone();
        idx.shuffle(rng);
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && total.is_finite() {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            // Every gamma draw underflowed: all mass on one client.
            let pick = rng.random_range(0..k);
            p = (0..k).map(|j| if j == pick { 1.0 } else { 0.0 }).collect();
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (j, shard) in shards.iter_mut().enumerate() {
            cum += p[j];
            let end = if j + 1 == k { n } else { ((cum * n as f64).floor() as usize).clamp(start, n) };
            shard.extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(shards)
}

/// Tops up under-filled shards from the largest one, taking its most common class.
fn repair(shards: &mut [Vec<usize>], min_samples: usize, ds: &LabeledDataset) {
    loop {
        let Some(needy) = (0..shards.len()).find(|&j| shards[j].len() < min_samples) else {
            return;
        };
        let donor = (0..shards.len()).max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j))).unwrap();
        let mut counts = vec![0usize; ds.classes()];
        for &i in &shards[donor] {
            counts[ds.label(i)] += 1;
        }
        let class = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let pos = shards[donor].iter().rposition(|&i| ds.label(i) == class).unwrap();
        let sample = shards[donor].remove(pos);
        shards[needy].push(sample);
    }
}
