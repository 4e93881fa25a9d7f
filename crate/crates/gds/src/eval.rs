//! Retrieval and threshold evaluation: distance matrices, mAP/CMC, ROC/PR,
//! distance histograms, and distribution-separation summaries.
//!
//! The retrieval protocol mirrors standard ReID minus camera constraints:
//! when queries equal the gallery, index-equal pairs are excluded instead
//! of same-camera matches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::pair_distance;

pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

/// Distribution-separation summary of positive vs negative distances.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Separation {
    /// mean(neg) - mean(pos).
    pub mean_gap: f64,
    /// (mean_neg - mean_pos) / (std_pos + std_neg).
    pub gap_in_sigmas: f64,
    /// Fraction of distances lying past the 0.1% tail boundary of the
    /// opposite population.
    pub empirical_overlap: f64,
}

/// Full evaluation payload for one checkpoint on one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
    pub auc: f64,
    pub pos_histogram: Vec<u64>,
    pub neg_histogram: Vec<u64>,
    pub separation: Separation,
    /// Queries without any positive in the gallery, skipped from mAP.
    pub skipped_queries: usize,
}

/// Pairwise distances between query and gallery unit vectors.
pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| pair_distance(q, g)).collect())
        .collect()
}

/// mAP and CMC under the ranking protocol: per query, rank the gallery by
/// ascending distance (ties by gallery index), average precision over
/// positive positions, mean over queries with at least one positive.
pub fn cmc_map(
    distances: &[Vec<f64>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    exclude_self: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    if distances.len() != query_labels.len() {
        return Err(Error::ShapeMismatch("cmc_map: query labels".into()));
    }
    let n_gallery = gallery_labels.len();
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let max_rank = if exclude_self {
        n_gallery.saturating_sub(1)
    } else {
        n_gallery
    };
    let mut cmc_hits = vec![0usize; max_rank];
    for (qi, row) in distances.iter().enumerate() {
        if row.len() != n_gallery {
            return Err(Error::ShapeMismatch("cmc_map: distance row".into()));
        }
        let mut order: Vec<usize> = (0..n_gallery)
            .filter(|&g| !(exclude_self && g == qi))
            .collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        let total_pos = order
            .iter()
            .filter(|&&g| gallery_labels[g] == query_labels[qi])
            .count();
        if total_pos == 0 {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = None;
        for (rank, &g) in order.iter().enumerate() {
            if gallery_labels[g] == query_labels[qi] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank);
                }
            }
        }
        ap_sum += ap / total_pos as f64;
        if let Some(r) = first_hit {
            for slot in cmc_hits.iter_mut().skip(r) {
                *slot += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::InvalidInput("cmc_map: no query has a positive".into()));
    }
    let cmc = cmc_hits
        .iter()
        .map(|&h| h as f64 / evaluated as f64)
        .collect();
    Ok((ap_sum / evaluated as f64, cmc, skipped))
}

/// ROC and PR curves for threshold-based verification: predicted same
/// identity iff distance < theta, theta swept over all distinct distances
/// plus sentinels. AUC by the trapezoid rule.
pub fn roc_pr(
    distances: &[f64],
    is_positive: &[bool],
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, f64)> {
    if distances.len() != is_positive.len() {
        return Err(Error::ShapeMismatch("roc_pr: label length".into()));
    }
    let p = is_positive.iter().filter(|&&b| b).count();
    let n = distances.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidInput(
            "roc_pr: need both positive and negative pairs".into(),
        ));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap());

    let mut roc = vec![(0.0, 0.0)];
    let mut pr = vec![(0.0, 1.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc = 0.0;
    let mut i = 0usize;
    while i < order.len() {
        // Consume a tie group so curve points sit between distinct values.
        let d = distances[order[i]];
        let mut j = i;
        while j < order.len() && distances[order[j]] == d {
            if is_positive[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let prev = *roc.last().unwrap();
        let point = (fp as f64 / n as f64, tp as f64 / p as f64);
        auc += (point.0 - prev.0) * (point.1 + prev.1) * 0.5;
        roc.push(point);
        pr.push((tp as f64 / p as f64, tp as f64 / (tp + fp) as f64));
        i = j;
    }
    Ok((roc, pr, auc))
}

/// Histograms of all positive-pair distances and (optionally subsampled)
/// negative-pair distances over fixed-width bins on [0,1].
pub fn distance_histograms(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bins: usize,
    negative_subsample: Option<(usize, &mut dyn rand::RngCore)>,
) -> Result<(Vec<u64>, Vec<u64>)> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidInput("distance_histograms: need >= 2 samples".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch("distance_histograms: labels".into()));
    }
    let (pos, neg) = pair_distance_lists(embeddings, labels)?;
    let neg = match negative_subsample {
        Some((count, rng)) if count < neg.len() => {
            let mut idx: Vec<usize> = (0..neg.len()).collect();
            idx.shuffle(rng);
            idx.truncate(count);
            idx.sort_unstable();
            idx.into_iter().map(|i| neg[i]).collect()
        }
        _ => neg,
    };
    Ok((histogram(&pos, bins), histogram(&neg, bins)))
}

/// All same-label and cross-label pair distances of a labeled embedding set.
pub fn pair_distance_lists(
    embeddings: &[Vec<f64>],
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let d = pair_distance(&embeddings[i], &embeddings[j])?;
            if labels[i] == labels[j] {
                pos.push(d);
            } else {
                neg.push(d);
            }
        }
    }
    Ok((pos, neg))
}

fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Separation summary of two distance populations.
pub fn separation_metrics(pos_distances: &[f64], neg_distances: &[f64]) -> Result<Separation> {
    if pos_distances.is_empty() || neg_distances.is_empty() {
        return Err(Error::InvalidInput("separation_metrics: empty population".into()));
    }
    let (mu_p, sd_p) = mean_std(pos_distances);
    let (mu_n, sd_n) = mean_std(neg_distances);
    let mean_gap = mu_n - mu_p;
    let gap_in_sigmas = mean_gap / (sd_p + sd_n).max(f64::MIN_POSITIVE);

    // A positive overlaps if it reaches past the lower 0.1% boundary of the
    // negatives; a negative overlaps if it reaches below the upper 0.1%
    // boundary of the positives.
    let neg_lo = quantile(neg_distances, 0.001);
    let pos_hi = quantile(pos_distances, 0.999);
    let over = pos_distances.iter().filter(|&&d| d >= neg_lo).count()
        + neg_distances.iter().filter(|&&d| d <= pos_hi).count();
    let empirical_overlap = over as f64 / (pos_distances.len() + neg_distances.len()) as f64;
    Ok(Separation {
        mean_gap,
        gap_in_sigmas,
        empirical_overlap,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as f64 - 1.0) * q.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}

/// Run the whole evaluation suite on a labeled test set of unit embeddings
/// under the self-excluded all-vs-all protocol.
pub fn evaluate_test_set(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    rng: &mut impl Rng,
    subsample_negatives: bool,
) -> Result<EvalReport> {
    let dist = distance_matrix(embeddings, embeddings)?;
    let (map, cmc, skipped) = cmc_map(&dist, labels, labels, true)?;
    let (pos, neg) = pair_distance_lists(embeddings, labels)?;
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let mut flags: Vec<bool> = vec![true; pos.len()];
    flags.extend(std::iter::repeat(false).take(neg.len()));
    let (roc_points, pr_points, auc) = roc_pr(&all, &flags)?;
    let subsample = if subsample_negatives {
        Some((pos.len(), rng as &mut dyn rand::RngCore))
    } else {
        None
    };
    let (pos_histogram, neg_histogram) =
        distance_histograms(embeddings, labels, DEFAULT_HISTOGRAM_BINS, subsample)?;
    let separation = separation_metrics(&pos, &neg)?;
    Ok(EvalReport {
        map,
        rank1: cmc.first().copied().unwrap_or(0.0),
        cmc,
        roc_points,
        pr_points,
        auc,
        pos_histogram,
        neg_histogram,
        separation,
        skipped_queries: skipped,
    })
}
