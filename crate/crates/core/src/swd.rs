//! Sliced Wasserstein distance between point sets via random 1-D projections.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwdConfig {
    /// Number of projection directions `L`.
    pub projections: usize,
    /// Exponent `p` of the 1-D Wasserstein distance.
    pub p: f32,
    /// Compare all classes as two pooled point sets instead of per-class singletons.
    pub pooled: bool,
}

impl Default for SwdConfig {
    fn default() -> Self {
        SwdConfig { projections: 64, p: 2.0, pooled: false }
    }
}

/// `count` directions drawn uniformly from the unit sphere in `dim` dimensions.
pub fn draw_projections(count: usize, dim: usize, rng: &mut Rng) -> Result<Tensor> {
    if count == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!("need L >= 1 and d >= 1, got {count}, {dim}")));
    }
    let mut data = Vec::with_capacity(count * dim);
    while data.len() < count * dim {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        data.extend(v.iter().map(|x| (x / norm) as f32));
    }
    Tensor::new(vec![count, dim], data)
}

/// Sliced p-Wasserstein distance between the row sets `u` and `v` (`[n, d]`, or
/// `[d]` for a single point) using `projections` directions drawn from `seed`.
pub fn sliced_wasserstein(u: &Tensor, v: &Tensor, projections: usize, p: f32, seed: u64) -> Result<f32> {
    let dim = *u.shape().last().ok_or(Error::EmptySet)?;
    let mut rng = rng::stream(seed, &[tag::PROJECTION]);
    let dirs = draw_projections(projections, dim, &mut rng)?;
    sliced_wasserstein_along(u, v, &dirs, p)
}

/// As [`sliced_wasserstein`] with explicit directions.
pub fn sliced_wasserstein_along(u: &Tensor, v: &Tensor, directions: &Tensor, p: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(u.clone())?;
    let b = tape.constant(v.clone())?;
    let d = tape.sliced_wasserstein(a, b, directions, p)?;
    Ok(tape.value(d).item())
}
