//! Synthetic multi-identity datasets with a controllable source -> target
//! domain shift, PK batch sampling, and exhaustive pair enumeration.
//!
//! Each identity is a Gaussian blob around a random center. The target
//! domain draws fresh identities, then pushes every center through one
//! shared random affine map (rotation plus per-dimension scaling) and adds
//! extra per-sample noise, which opens the adaptation gap.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub identity_count: usize,
    pub dim: usize,
    pub rng_seed: u64,
}

/// Shared affine map + noise applied to the target domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftConfig {
    #[serde(default = "default_true")]
    pub rotate: bool,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
    /// Per-sample noise sigma as a multiple of the cluster spread.
    #[serde(default = "default_noise_factor")]
    pub noise_factor: f64,
}

fn default_true() -> bool {
    true
}
fn default_scale_min() -> f64 {
    0.5
}
fn default_scale_max() -> f64 {
    2.0
}
fn default_noise_factor() -> f64 {
    0.3
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            rotate: true,
            scale_min: default_scale_min(),
            scale_max: default_scale_max(),
            noise_factor: default_noise_factor(),
        }
    }
}

impl ShiftConfig {
    /// No rotation, unit scale, zero noise: target matches source
    /// distributionally.
    pub fn none() -> Self {
        ShiftConfig {
            rotate: false,
            scale_min: 1.0,
            scale_max: 1.0,
            noise_factor: 0.0,
        }
    }
}

/// Generate one domain: `identity_count` Gaussian blobs in `dim` dimensions.
///
/// Centers are random and hierarchical: `groups` anchor points are drawn
/// i.i.d. standard normal scaled by `group_scale`, and each identity's
/// center adds `center_scale`-scaled Gaussian scatter around its anchor
/// (round-robin assignment). Groups are well separated while identities
/// within a group can overlap, which mirrors the coarse/fine structure of
/// real retrieval data. `groups = 1` with `group_scale = 0` recovers flat
/// i.i.d. centers. Samples add `cluster_spread`-scaled isotropic noise.
/// For the target domain the centers pass through the shared shift map and
/// samples receive extra noise. Deterministic per seed.
#[allow(clippy::too_many_arguments)]
pub fn generate_domain(
    identity_count: usize,
    samples_per_identity: usize,
    dim: usize,
    cluster_spread: f64,
    center_scale: f64,
    groups: usize,
    group_scale: f64,
    shift: Option<&ShiftConfig>,
    domain: Domain,
    rng: &mut impl Rng,
    seed_tag: u64,
) -> Result<LabeledDataset> {
    if identity_count == 0 || samples_per_identity == 0 || dim == 0 {
        return Err(Error::InvalidInput(
            "generate_domain: counts and dim must be positive".into(),
        ));
    }
    if cluster_spread < 0.0 {
        return Err(Error::InvalidInput("negative cluster_spread".into()));
    }
    let groups = groups.clamp(1, identity_count);

    let anchors: Vec<Vec<f64>> = (0..groups)
        .map(|_| gaussian_vec(dim, group_scale, rng))
        .collect();
    let mut centers: Vec<Vec<f64>> = (0..identity_count)
        .map(|i| {
            let mut c = gaussian_vec(dim, center_scale, rng);
            for (ck, ak) in c.iter_mut().zip(&anchors[i % groups]) {
                *ck += ak;
            }
            c
        })
        .collect();

    let mut extra_noise = 0.0;
    if let Some(cfg) = shift {
        let rotation = if cfg.rotate {
            Some(random_rotation(dim, rng))
        } else {
            None
        };
        let scales: Vec<f64> = (0..dim)
            .map(|_| {
                if cfg.scale_min == cfg.scale_max {
                    cfg.scale_min
                } else {
                    rng.gen_range(cfg.scale_min..cfg.scale_max)
                }
            })
            .collect();
        for c in centers.iter_mut() {
            let rotated = match &rotation {
                Some(q) => mat_vec(q, c, dim),
                None => c.clone(),
            };
            *c = rotated.iter().zip(&scales).map(|(v, s)| v * s).collect();
        }
        extra_noise = cfg.noise_factor * cluster_spread;
    }

    let mut samples = Vec::with_capacity(identity_count * samples_per_identity);
    for (identity, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_identity {
            let mut f = gaussian_vec(dim, cluster_spread, rng);
            for (fi, ci) in f.iter_mut().zip(center) {
                *fi += ci;
            }
            if extra_noise > 0.0 {
                for (fi, n) in f.iter_mut().zip(gaussian_vec(dim, extra_noise, rng)) {
                    *fi += n;
                }
            }
            samples.push(Sample {
                features: f,
                identity,
                domain,
            });
        }
    }
    Ok(LabeledDataset {
        samples,
        identity_count,
        dim,
        rng_seed: seed_tag,
    })
}

fn gaussian_vec(dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Random rotation via Gram-Schmidt on a Gaussian matrix (row-major d x d).
fn random_rotation(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = (0..dim).map(|_| gaussian_vec(dim, 1.0, rng)).collect();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                rows[i][k] -= dot * rows[j][k];
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in rows[i].iter_mut() {
            *x /= norm;
        }
    }
    let mut flat = vec![0.0; dim * dim];
    for (i, row) in rows.iter().enumerate() {
        flat[i * dim..(i + 1) * dim].copy_from_slice(row);
    }
    flat
}

fn mat_vec(m: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|r| m[r * dim..(r + 1) * dim].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// A PK batch: P distinct identities with K samples each.
#[derive(Debug, Clone)]
pub struct PkBatch {
    /// Indices into the underlying sample store.
    pub indices: Vec<usize>,
    /// Labels aligned with `indices`.
    pub labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

/// Per-identity index groups over some sample collection; the view PK
/// sampling operates on.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    /// `groups[label] = indices of that identity's samples`.
    pub groups: Vec<Vec<usize>>,
}

impl IdentityIndex {
    /// Build from `(sample_index, label)` pairs with contiguous labels.
    pub fn from_labels(pairs: &[(usize, usize)]) -> Self {
        let max_label = pairs.iter().map(|&(_, l)| l).max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); max_label];
        for &(idx, label) in pairs {
            groups[label].push(idx);
        }
        IdentityIndex { groups }
    }

    pub fn from_dataset(ds: &LabeledDataset) -> Self {
        let pairs: Vec<(usize, usize)> = ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.identity))
            .collect();
        Self::from_labels(&pairs)
    }
}

/// Sample a PK batch: P identities uniformly without replacement, then K
/// samples per identity uniformly without replacement.
pub fn pk_sample(index: &IdentityIndex, p: usize, k: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    let eligible: Vec<usize> = (0..index.groups.len())
        .filter(|&g| index.groups[g].len() >= k)
        .collect();
    if eligible.len() < p {
        return Err(Error::InvalidInput(format!(
            "pk_sample: need {p} identities with >= {k} samples, have {}",
            eligible.len()
        )));
    }
    let chosen: Vec<usize> = eligible.choose_multiple(rng, p).copied().collect();
    let mut indices = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for &g in &chosen {
        for &idx in index.groups[g].choose_multiple(rng, k) {
            indices.push(idx);
            labels.push(g);
        }
    }
    Ok(PkBatch {
        indices,
        labels,
        p,
        k,
    })
}

/// All unordered within-batch pairs, split into same-identity positives and
/// cross-identity negatives. Indices are batch positions (0..P*K).
pub fn enumerate_pairs(batch: &PkBatch) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = batch.labels.len();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if batch.labels[i] == batch.labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

/// Stratified split: per identity, `train_frac` of the samples go to the
/// first list. Returns (train indices, test indices).
pub fn split_by_identity(
    ds: &LabeledDataset,
    train_frac: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let index = IdentityIndex::from_dataset(ds);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in &index.groups {
        let mut order = group.clone();
        order.shuffle(rng);
        let cut = ((order.len() as f64) * train_frac).round() as usize;
        train.extend_from_slice(&order[..cut]);
        test.extend_from_slice(&order[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

// --- CSV export/import -----------------------------------------------------
// One row per sample: domain, identity, f0, f1, ...

pub fn export_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string(), "identity".to_string()];
    header.extend((0..ds.dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut rec = vec![s.domain.to_string(), s.identity.to_string()];
        rec.extend(s.features.iter().map(|f| format!("{f:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_csv(path: &Path) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().saturating_sub(2);
    if dim == 0 {
        return Err(Error::InvalidInput("dataset CSV has no feature columns".into()));
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let domain = match &rec[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(Error::InvalidInput(format!("unknown domain '{other}'")));
            }
        };
        let identity: usize = rec[1]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad identity '{}'", &rec[1])))?;
        let features = (2..rec.len())
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad feature '{}'", &rec[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.len() != dim {
            return Err(Error::ShapeMismatch("ragged dataset CSV".into()));
        }
        samples.push(Sample {
            features,
            identity,
            domain,
        });
    }
    let identity_count = samples.iter().map(|s| s.identity).max().map_or(0, |m| m + 1);
    Ok(LabeledDataset {
        samples,
        identity_count,
        dim,
        rng_seed: 0,
    })
}
