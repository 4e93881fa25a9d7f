//! Separation losses and their exact analytic gradients.
//!
//! The central piece is [`gds_h_loss`]: the separation loss evaluated on the
//! momentum-updated global statistics, differentiated back through the
//! (1-beta)-weighted local moments, the pair distances, and the L2
//! normalization of the batch embeddings. The pre-update global statistics
//! are treated as constants of the step. [`triplet_batch_hard`] and
//! [`cross_entropy`] provide the baseline/pretraining losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{batch_moments, momentum_update, GaussianStats, VAR_FLOOR};

/// Hyper-parameters of the separation losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the hard-mining term in the combined loss.
    #[serde(default = "default_lambda_h")]
    pub lambda_h: f64,
    /// Weight of the variance term inside the basic separation loss.
    #[serde(default = "default_lambda_sigma")]
    pub lambda_sigma: f64,
    /// Tail width (in standard deviations) used by hard mining.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_lambda_h() -> f64 {
    0.5
}
fn default_lambda_sigma() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    3.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_h: default_lambda_h(),
            lambda_sigma: default_lambda_sigma(),
            kappa: default_kappa(),
        }
    }
}

/// Loss value plus per-sample gradients with respect to the batch embeddings.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distance between two unit vectors: `d = ||x1 - x2|| / 2`, in [0,1].
pub fn pair_distance(x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::ShapeMismatch(format!(
            "pair_distance: {} vs {}",
            x1.len(),
            x2.len()
        )));
    }
    for (name, v) in [("x1", x1), ("x2", x2)] {
        let norm = l2_norm(v);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "pair_distance: {name} is not unit-norm (||.|| = {norm})"
            )));
        }
    }
    Ok(raw_distance(x1, x2))
}

fn raw_distance(x1: &[f64], x2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x1.iter().zip(x2) {
        let d = a - b;
        acc += d * d;
    }
    0.5 * acc.sqrt()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Basic separation loss on (post-update) global statistics:
/// `Softplus(mean_pos - mean_neg) + lambda_sigma * (var_pos + var_neg)`.
pub fn gds_loss(pos: &GaussianStats, neg: &GaussianStats, cfg: &LossConfig) -> f64 {
    softplus(pos.mean - neg.mean) + cfg.lambda_sigma * (pos.variance + neg.variance)
}

/// Distribution-based hard-mining loss: a soft margin between the upper
/// kappa-sigma tail of the positive distribution and the lower tail of the
/// negative one.
pub fn hard_mining_loss(pos: &GaussianStats, neg: &GaussianStats, cfg: &LossConfig) -> f64 {
    softplus((pos.mean + cfg.kappa * pos.std()) - (neg.mean - cfg.kappa * neg.std()))
}

struct PopulationGrad {
    /// d(loss)/d(d_i) for each pair distance of this population.
    per_distance: Vec<f64>,
}

/// Combined separation loss with hard mining, evaluated at the statistics
/// after absorbing the current batch, plus the analytic gradient with
/// respect to the batch embeddings.
///
/// Embeddings may be any non-zero vectors; they are normalized internally
/// and the returned gradient includes the normalization Jacobian, so the
/// output composes directly with the embedder's backward pass (where the
/// projection is idempotent) and can be finite-difference checked on the
/// raw inputs.
///
/// Returns the post-update statistics for the caller to store.
pub fn gds_h_loss(
    batch_embeddings: &[Vec<f64>],
    pos_pairs: &[(usize, usize)],
    neg_pairs: &[(usize, usize)],
    pos_stats: &GaussianStats,
    neg_stats: &GaussianStats,
    cfg: &LossConfig,
) -> Result<(LossOutput, GaussianStats, GaussianStats)> {
    if pos_pairs.is_empty() {
        return Err(Error::DegenerateBatch("no positive pairs".into()));
    }
    if neg_pairs.is_empty() {
        return Err(Error::DegenerateBatch("no negative pairs".into()));
    }
    let unit = normalize_batch(batch_embeddings)?;
    let n = unit.len();
    for &(a, b) in pos_pairs.iter().chain(neg_pairs) {
        if a >= n || b >= n {
            return Err(Error::InvalidInput(format!(
                "pair index ({a},{b}) out of range for batch of {n}"
            )));
        }
    }

    let pos_d: Vec<f64> = pos_pairs
        .iter()
        .map(|&(a, b)| raw_distance(&unit[a], &unit[b]))
        .collect();
    let neg_d: Vec<f64> = neg_pairs
        .iter()
        .map(|&(a, b)| raw_distance(&unit[a], &unit[b]))
        .collect();

    // One joint update per batch; both loss terms see the same post-update
    // statistics. Local variances are centered on the pre-update means.
    let pos_m = batch_moments(&pos_d, pos_stats.mean)?;
    let neg_m = batch_moments(&neg_d, neg_stats.mean)?;
    let pos_new = momentum_update(pos_stats, &pos_m);
    let neg_new = momentum_update(neg_stats, &neg_m);

    let value = gds_loss(&pos_new, &neg_new, cfg) + cfg.lambda_h * hard_mining_loss(&pos_new, &neg_new, cfg);

    // Sensitivities of the loss to the post-update statistics.
    let s_gap = sigmoid(pos_new.mean - neg_new.mean);
    let tail_arg =
        (pos_new.mean + cfg.kappa * pos_new.std()) - (neg_new.mean - cfg.kappa * neg_new.std());
    let s_tail = sigmoid(tail_arg);
    let d_mean_pos = s_gap + cfg.lambda_h * s_tail;
    let d_mean_neg = -(s_gap + cfg.lambda_h * s_tail);
    // d(sigma)/d(var) = 1/(2 sigma); zero when the variance floor clamped.
    let d_var_pos = pop_var_grad(pos_stats, &pos_m, &pos_new, cfg, s_tail);
    let d_var_neg = pop_var_grad(neg_stats, &neg_m, &neg_new, cfg, s_tail);

    let pos_grad = population_grad(
        &pos_d, pos_stats, d_mean_pos, d_var_pos,
    );
    let neg_grad = population_grad(
        &neg_d, neg_stats, d_mean_neg, d_var_neg,
    );

    let dim = unit[0].len();
    let mut grad_unit = vec![vec![0.0; dim]; n];
    accumulate_pair_grads(&unit, pos_pairs, &pos_d, &pos_grad, &mut grad_unit);
    accumulate_pair_grads(&unit, neg_pairs, &neg_d, &neg_grad, &mut grad_unit);

    let grad_embeddings = project_through_normalization(batch_embeddings, &unit, &grad_unit);
    Ok((
        LossOutput {
            value,
            grad_embeddings,
        },
        pos_new,
        neg_new,
    ))
}

fn pop_var_grad(
    old: &GaussianStats,
    m: &crate::stats::BatchMoments,
    new: &GaussianStats,
    cfg: &LossConfig,
    s_tail: f64,
) -> f64 {
    let raw = old.momentum * old.variance + (1.0 - old.momentum) * m.local_variance;
    if raw < VAR_FLOOR {
        // Clamp active: the update no longer depends on the batch.
        return 0.0;
    }
    cfg.lambda_sigma + cfg.lambda_h * s_tail * cfg.kappa / (2.0 * new.std())
}

fn population_grad(
    distances: &[f64],
    old: &GaussianStats,
    d_mean: f64,
    d_var: f64,
) -> PopulationGrad {
    let n = distances.len() as f64;
    let w = 1.0 - old.momentum;
    let per_distance = distances
        .iter()
        .map(|&d| w * (d_mean / n + d_var * 2.0 * (d - old.mean) / n))
        .collect();
    PopulationGrad { per_distance }
}

fn accumulate_pair_grads(
    unit: &[Vec<f64>],
    pairs: &[(usize, usize)],
    distances: &[f64],
    grad: &PopulationGrad,
    out: &mut [Vec<f64>],
) {
    for ((&(a, b), &d), &c) in pairs.iter().zip(distances).zip(&grad.per_distance) {
        if d == 0.0 {
            // d(d)/dx undefined at coincident points; subgradient zero.
            continue;
        }
        // d(d)/dx_a = (x_a - x_b) / (4 d)
        let scale = c / (4.0 * d);
        for k in 0..unit[a].len() {
            let diff = unit[a][k] - unit[b][k];
            out[a][k] += scale * diff;
            out[b][k] -= scale * diff;
        }
    }
}

fn normalize_batch(batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty embedding batch".into()));
    }
    let dim = batch[0].len();
    batch
        .iter()
        .map(|x| {
            if x.len() != dim {
                return Err(Error::ShapeMismatch("ragged embedding batch".into()));
            }
            let norm = l2_norm(x);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidInput("zero or non-finite embedding".into()));
            }
            Ok(x.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Map gradients w.r.t. unit embeddings back to the raw inputs:
/// `g_raw = (g - (g . u) u) / ||x||`.
fn project_through_normalization(
    raw: &[Vec<f64>],
    unit: &[Vec<f64>],
    grad_unit: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    raw.iter()
        .zip(unit)
        .zip(grad_unit)
        .map(|((x, u), g)| {
            let norm = l2_norm(x);
            let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
            g.iter()
                .zip(u)
                .map(|(gi, ui)| (gi - dot * ui) / norm)
                .collect()
        })
        .collect()
}

/// Batch-hard triplet loss with a soft margin.
///
/// For every anchor with at least one same-label partner, the loss term is
/// `Softplus(max positive distance - min negative distance)`; terms are
/// averaged over anchors. Argmax/argmin ties break toward the lowest sample
/// index so gradients are deterministic.
pub fn triplet_batch_hard(batch_embeddings: &[Vec<f64>], labels: &[usize]) -> Result<LossOutput> {
    let n = batch_embeddings.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "triplet: {n} embeddings vs {} labels",
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateBatch(
            "triplet loss needs at least two identities".into(),
        ));
    }
    let unit = normalize_batch(batch_embeddings)?;
    let dim = unit[0].len();

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = raw_distance(&unit[i], &unit[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut value = 0.0;
    let mut grad_unit = vec![vec![0.0; dim]; n];
    let mut anchors = 0usize;
    let mut terms: Vec<(usize, usize, usize, f64)> = Vec::new();
    for a in 0..n {
        let mut hp: Option<(usize, f64)> = None;
        let mut hn: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hp.map_or(true, |(_, d)| dist[a][j] > d) {
                    hp = Some((j, dist[a][j]));
                }
            } else if hn.map_or(true, |(_, d)| dist[a][j] < d) {
                hn = Some((j, dist[a][j]));
            }
        }
        let (Some((jp, dp)), Some((jn, dn))) = (hp, hn) else {
            continue;
        };
        anchors += 1;
        value += softplus(dp - dn);
        terms.push((a, jp, jn, sigmoid(dp - dn)));
    }
    if anchors == 0 {
        return Err(Error::DegenerateBatch(
            "no anchor has a positive partner".into(),
        ));
    }
    let inv = 1.0 / anchors as f64;
    value *= inv;
    for (a, jp, jn, s) in terms {
        add_distance_grad(&unit, &dist, a, jp, s * inv, &mut grad_unit);
        add_distance_grad(&unit, &dist, a, jn, -s * inv, &mut grad_unit);
    }
    let grad_embeddings = project_through_normalization(batch_embeddings, &unit, &grad_unit);
    Ok(LossOutput {
        value,
        grad_embeddings,
    })
}

fn add_distance_grad(
    unit: &[Vec<f64>],
    dist: &[Vec<f64>],
    a: usize,
    b: usize,
    coeff: f64,
    out: &mut [Vec<f64>],
) {
    let d = dist[a][b];
    if d == 0.0 {
        return;
    }
    let scale = coeff / (4.0 * d);
    for k in 0..unit[a].len() {
        let diff = unit[a][k] - unit[b][k];
        out[a][k] += scale * diff;
        out[b][k] -= scale * diff;
    }
}

/// Softmax cross-entropy for the stage-1 classification head.
///
/// Returns the loss and its gradient with respect to the logits
/// (`softmax(logits) - one_hot(label)`).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + exp_sum.ln();
    let value = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - max).exp() / exp_sum).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}
