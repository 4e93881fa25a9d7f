//! Run configuration: JSON schema, defaults, and deterministic seed
//! fan-out to named sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::ShiftConfig;
use crate::embedder::MlpConfig;
use crate::losses::LossConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Which loss drives the adaptation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Batch-hard triplet loss on pseudo labels only (the baseline scheme).
    TripletOnly,
    /// Triplet plus the basic separation loss (hard-mining weight zero).
    TripletGds,
    /// Triplet plus the full separation loss with hard mining.
    TripletGdsH,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triplet" | "triplet-only" => Ok(LossKind::TripletOnly),
            "gds" | "triplet-gds" => Ok(LossKind::TripletGds),
            "gds-h" | "triplet-gds-h" => Ok(LossKind::TripletGdsH),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// Clustering algorithm for pseudo-label assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum ClusteringConfig {
    Dbscan {
        /// Quantile of the pairwise-distance distribution used as eps.
        #[serde(default = "default_eps_percentile")]
        eps_percentile: f64,
        /// Fixed eps; overrides the percentile heuristic when set.
        #[serde(default)]
        eps_override: Option<f64>,
        #[serde(default = "default_min_pts")]
        min_pts: usize,
    },
    Kmeans {
        /// Cluster count; defaults to the configured identity count.
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_kmeans_iters")]
        max_iters: usize,
    },
}

fn default_eps_percentile() -> f64 {
    0.016
}
fn default_min_pts() -> usize {
    4
}
fn default_kmeans_iters() -> usize {
    100
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig::Dbscan {
            eps_percentile: default_eps_percentile(),
            eps_override: None,
            min_pts: default_min_pts(),
        }
    }
}

/// Synthetic benchmark shape.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default = "default_identities")]
    pub identities: usize,
    #[serde(default = "default_samples_per_identity")]
    pub samples_per_identity: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    /// Anchor count for the hierarchical center layout.
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_group_scale")]
    pub group_scale: f64,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_identities() -> usize {
    64
}
fn default_samples_per_identity() -> usize {
    20
}
fn default_dim() -> usize {
    32
}
fn default_cluster_spread() -> f64 {
    0.25
}
fn default_center_scale() -> f64 {
    0.4
}
fn default_groups() -> usize {
    16
}
fn default_group_scale() -> f64 {
    1.2
}
fn default_train_frac() -> f64 {
    0.7
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: default_identities(),
            samples_per_identity: default_samples_per_identity(),
            dim: default_dim(),
            cluster_spread: default_cluster_spread(),
            center_scale: default_center_scale(),
            groups: default_groups(),
            group_scale: default_group_scale(),
            shift: ShiftConfig::default(),
            train_frac: default_train_frac(),
        }
    }
}

/// Full pipeline configuration. Everything flows from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage1_lr")]
    pub stage1_lr: f64,
    /// Alternation rounds (clustering + adaptation). Desk-scale default.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs_per_round")]
    pub epochs_per_round: usize,
    #[serde(default = "default_stage3_lr")]
    pub stage3_lr: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub loss_cfg: LossConfig,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the separation loss relative to the triplet term.
    #[serde(default = "default_gds_weight")]
    pub gds_weight: f64,
    /// Batches at the start of adaptation that update the statistics but
    /// contribute no separation gradient.
    #[serde(default = "default_warmup_batches")]
    pub warmup_batches: usize,
    /// Reset the global statistics at every clustering round instead of
    /// letting them persist (comparison mode).
    #[serde(default)]
    pub reset_stats_each_round: bool,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_p() -> usize {
    32
}
fn default_k() -> usize {
    4
}
fn default_stage1_epochs() -> usize {
    80
}
fn default_stage1_lr() -> f64 {
    3e-4
}
fn default_rounds() -> usize {
    10
}
fn default_epochs_per_round() -> usize {
    10
}
fn default_stage3_lr() -> f64 {
    6e-5
}
fn default_loss() -> LossKind {
    LossKind::TripletGdsH
}
fn default_beta() -> f64 {
    0.99
}
fn default_gds_weight() -> f64 {
    1.0
}
fn default_warmup_batches() -> usize {
    5
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(crate::Error::InvalidInput(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(crate::Error::InvalidInput("need P >= 2 and K >= 2".into()));
        }
        if self.rounds == 0 || self.epochs_per_round == 0 || self.stage1_epochs == 0 {
            return Err(crate::Error::InvalidInput("epoch/round counts must be >= 1".into()));
        }
        if self.stage1_lr <= 0.0 || self.stage3_lr <= 0.0 {
            return Err(crate::Error::InvalidInput("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(crate::Error::InvalidInput("beta must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Derive an independent RNG for a named sub-stream of the root seed, so
/// data generation, init, sampling, and clustering can be re-seeded
/// independently.
pub fn stream_rng(root_seed: u64, name: &str) -> ChaCha12Rng {
    // FNV-1a over the stream name, mixed with the root via splitmix64.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = root_seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}
