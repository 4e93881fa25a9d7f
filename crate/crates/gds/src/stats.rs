//! Momentum-maintained global distance distributions.
//!
//! Two [`GaussianStats`] instances (one for positive pairs, one for negative
//! pairs) track the dataset-wise mean and variance of pair distances. Each
//! training batch contributes its local moments through an exponential
//! moving average; the local variance is deliberately centered on the
//! *global* mean held before the update, not on the batch mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default initialization for both distributions: mean 0.5, variance 1/6.
/// Performance is insensitive to these values; they only seed the EMA.
pub const DEFAULT_INIT_MEAN: f64 = 0.5;
pub const DEFAULT_INIT_VAR: f64 = 1.0 / 6.0;

/// Floor applied to the variance after every update so that the standard
/// deviation stays defined.
pub const VAR_FLOOR: f64 = 1e-12;

/// Global Gaussian model of one pair-distance population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    /// Global mean, in distance units; stays in [0,1] when all absorbed
    /// distances do.
    pub mean: f64,
    /// Global variance, clamped to `>= VAR_FLOOR`.
    pub variance: f64,
    /// Momentum coefficient beta in [0,1). Fixed at construction.
    pub momentum: f64,
    /// Number of batches absorbed; diagnostics only.
    pub count_seen: u64,
}

impl GaussianStats {
    /// Stats with the default (0.5, 1/6) initialization.
    pub fn new(momentum: f64) -> Self {
        Self::with_init(DEFAULT_INIT_MEAN, DEFAULT_INIT_VAR, momentum)
    }

    pub fn with_init(mean: f64, variance: f64, momentum: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert!(variance >= 0.0, "variance must be non-negative");
        GaussianStats {
            mean,
            variance: variance.max(VAR_FLOOR),
            momentum,
            count_seen: 0,
        }
    }

    /// Standard deviation.
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Local (batch-level) moments of one pair population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMoments {
    /// Arithmetic mean of the batch distances.
    pub local_mean: f64,
    /// Mean squared deviation of the batch distances around the *global*
    /// mean supplied to [`batch_moments`].
    pub local_variance: f64,
    /// Number of distances in the batch.
    pub pair_count: usize,
}

/// Compute batch moments for a list of pair distances.
///
/// The local variance is centered on `global_mean` (the pre-update global
/// mean), not on the local mean.
pub fn batch_moments(distances: &[f64], global_mean: f64) -> Result<BatchMoments> {
    if distances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = distances.len() as f64;
    let local_mean = distances.iter().sum::<f64>() / n;
    let local_variance = distances
        .iter()
        .map(|d| (d - global_mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(BatchMoments {
        local_mean,
        local_variance,
        pair_count: distances.len(),
    })
}

/// EMA update of the global distribution from batch moments:
/// `mean <- b*mean + (1-b)*local_mean`, same for the variance, with the
/// variance clamped to `VAR_FLOOR` afterwards.
pub fn momentum_update(stats: &GaussianStats, moments: &BatchMoments) -> GaussianStats {
    let b = stats.momentum;
    GaussianStats {
        mean: b * stats.mean + (1.0 - b) * moments.local_mean,
        variance: (b * stats.variance + (1.0 - b) * moments.local_variance).max(VAR_FLOOR),
        momentum: b,
        count_seen: stats.count_seen + 1,
    }
}

/// Exact mean and population variance of the concatenation of two sets.
///
/// Serves as the independent oracle for the momentum update: with
/// `beta = N/(N+M)` and `N >> M` the EMA approximates these pooled values.
pub fn pooled_oracle(set_a: &[f64], set_b: &[f64]) -> Result<(f64, f64)> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::InvalidInput("pooled_oracle: empty set".into()));
    }
    let n = (set_a.len() + set_b.len()) as f64;
    let mean = (set_a.iter().sum::<f64>() + set_b.iter().sum::<f64>()) / n;
    let var = (set_a.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
        + set_b.iter().map(|d| (d - mean).powi(2)).sum::<f64>())
        / n;
    Ok((mean, var))
}

/// Mean/variance pair as serialized in stats snapshots.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    pub var: f64,
}

/// Per-epoch snapshot of both global distributions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub pos: MeanVar,
    pub neg: MeanVar,
    pub beta: f64,
    pub step: u64,
}

impl StatsSnapshot {
    pub fn capture(pos: &GaussianStats, neg: &GaussianStats, step: u64) -> Self {
        StatsSnapshot {
            pos: MeanVar {
                mean: pos.mean,
                var: pos.variance,
            },
            neg: MeanVar {
                mean: neg.mean,
                var: neg.variance,
            },
            beta: pos.momentum,
            step,
        }
    }
}
