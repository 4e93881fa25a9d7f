//! Central finite-difference verification of every analytic gradient in
//! the crate: the separation loss, the batch-hard triplet loss, the
//! classifier cross-entropy, and the full params-to-loss chain through the
//! embedder.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::stream_rng;
use crate::embedder::{backward, forward, MlpConfig, MlpParams};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, gds_h_loss, triplet_batch_hard, LossConfig};
use crate::stats::GaussianStats;

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Floor on the denominator of the relative error, for near-zero gradients.
pub const REL_FLOOR: f64 = 1e-8;

/// One suite's outcome over several random instances.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Infinity-norm relative error between analytic and numeric gradients.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0f64, f64::max);
    diff / scale.max(REL_FLOOR)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + h;
        let up = f(&work)?;
        work[i] = x[i] - h;
        let down = f(&work)?;
        work[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn random_batch(rng: &mut impl Rng, batch: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let embeddings = (0..batch)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // Two samples per identity guarantees positive and negative pairs.
    let labels = (0..batch).map(|i| i / 2).collect();
    (embeddings, labels)
}

fn pairs_from_labels(labels: &[usize]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

fn random_stats(rng: &mut impl Rng) -> (GaussianStats, GaussianStats) {
    let beta = 0.8 + 0.15 * rng.gen::<f64>();
    let pos = GaussianStats::with_init(
        0.2 + 0.2 * rng.gen::<f64>(),
        0.005 + 0.02 * rng.gen::<f64>(),
        beta,
    );
    let neg = GaussianStats::with_init(
        0.5 + 0.3 * rng.gen::<f64>(),
        0.005 + 0.02 * rng.gen::<f64>(),
        beta,
    );
    (pos, neg)
}

fn flatten(batch: &[Vec<f64>]) -> Vec<f64> {
    batch.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|r| flat[r * dim..(r + 1) * dim].to_vec()).collect()
}

/// Max relative error of the separation-loss gradient on one random
/// instance.
pub fn check_gds_h(rng: &mut impl Rng, batch: usize, dim: usize, cfg: &LossConfig) -> Result<f64> {
    let (embeddings, labels) = random_batch(rng, batch, dim);
    let (pos_pairs, neg_pairs) = pairs_from_labels(&labels);
    let (pos_stats, neg_stats) = random_stats(rng);
    let (out, _, _) = gds_h_loss(&embeddings, &pos_pairs, &neg_pairs, &pos_stats, &neg_stats, cfg)?;
    let x0 = flatten(&embeddings);
    let numeric = numeric_grad(
        &mut |x| {
            let e = unflatten(x, batch, dim);
            gds_h_loss(&e, &pos_pairs, &neg_pairs, &pos_stats, &neg_stats, cfg)
                .map(|(o, _, _)| o.value)
        },
        &x0,
        DEFAULT_STEP,
    )?;
    Ok(rel_error(&flatten(&out.grad_embeddings), &numeric))
}

/// Max relative error of the triplet-loss gradient on one random instance.
pub fn check_triplet(rng: &mut impl Rng, batch: usize, dim: usize) -> Result<f64> {
    let (embeddings, labels) = random_batch(rng, batch, dim);
    let out = triplet_batch_hard(&embeddings, &labels)?;
    let x0 = flatten(&embeddings);
    let numeric = numeric_grad(
        &mut |x| triplet_batch_hard(&unflatten(x, batch, dim), &labels).map(|o| o.value),
        &x0,
        DEFAULT_STEP,
    )?;
    Ok(rel_error(&flatten(&out.grad_embeddings), &numeric))
}

/// Max relative error of the cross-entropy gradient on one random instance.
pub fn check_cross_entropy(rng: &mut impl Rng, classes: usize) -> Result<f64> {
    let logits: Vec<f64> = (0..classes)
        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let label = rng.gen_range(0..classes);
    let (_, grad) = cross_entropy(&logits, label)?;
    let numeric = numeric_grad(
        &mut |x| cross_entropy(x, label).map(|(v, _)| v),
        &logits,
        DEFAULT_STEP,
    )?;
    Ok(rel_error(&grad, &numeric))
}

fn flatten_params(params: &MlpParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for l in &params.layers {
        flat.extend_from_slice(&l.w);
        flat.extend_from_slice(&l.b);
    }
    flat
}

fn load_params(params: &mut MlpParams, flat: &[f64]) {
    let mut at = 0;
    for l in params.layers.iter_mut() {
        let wn = l.w.len();
        l.w.copy_from_slice(&flat[at..at + wn]);
        at += wn;
        let bn = l.b.len();
        l.b.copy_from_slice(&flat[at..at + bn]);
        at += bn;
    }
    debug_assert_eq!(at, flat.len());
}

/// Max relative error of the full chain: MLP parameters -> forward ->
/// combined triplet + separation loss.
pub fn check_end_to_end(rng: &mut impl Rng, batch: usize, input_dim: usize) -> Result<f64> {
    let cfg = MlpConfig {
        input: input_dim,
        hidden: 6,
        embed: 5,
    };
    let loss_cfg = LossConfig::default();
    let params = MlpParams::init(cfg, None, rng);
    let inputs: Vec<Vec<f64>> = (0..batch)
        .map(|_| {
            (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..batch).map(|i| i / 2).collect();
    let (pos_pairs, neg_pairs) = pairs_from_labels(&labels);
    let (pos_stats, neg_stats) = random_stats(rng);

    let objective = |p: &MlpParams| -> Result<(f64, Vec<Vec<f64>>)> {
        let (embeddings, _) = forward(p, &inputs)?;
        let triplet = triplet_batch_hard(&embeddings, &labels)?;
        let (gds, _, _) = gds_h_loss(
            &embeddings,
            &pos_pairs,
            &neg_pairs,
            &pos_stats,
            &neg_stats,
            &loss_cfg,
        )?;
        let upstream = triplet
            .grad_embeddings
            .iter()
            .zip(&gds.grad_embeddings)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok((triplet.value + gds.value, upstream))
    };

    let (embeddings, trace) = forward(&params, &inputs)?;
    debug_assert_eq!(embeddings.len(), batch);
    let (_, upstream) = objective(&params)?;
    let (grads, _) = backward(&params, &trace, &upstream)?;
    let analytic = flatten_params(&MlpParams {
        layers: grads.layers,
        ..params.clone()
    });

    let x0 = flatten_params(&params);
    let mut scratch = params.clone();
    let numeric = numeric_grad(
        &mut |x| {
            load_params(&mut scratch, x);
            objective(&scratch).map(|(v, _)| v)
        },
        &x0,
        DEFAULT_STEP,
    )?;
    Ok(rel_error(&analytic, &numeric))
}

/// Run every suite over `instances` independent random instances each.
pub fn run_all(seed: u64, instances: usize, batch: usize, dim: usize) -> Result<Vec<CheckResult>> {
    if batch < 4 || batch % 2 != 0 {
        return Err(Error::InvalidInput(
            "gradcheck batch must be even and >= 4".into(),
        ));
    }
    let cfg = LossConfig::default();
    let mut results = Vec::new();

    let mut rng = stream_rng(seed, "gradcheck-gds-h");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(check_gds_h(&mut rng, batch, dim, &cfg)?);
    }
    results.push(CheckResult {
        suite: "gds-h".into(),
        instances,
        max_rel_err: worst,
    });

    let mut rng = stream_rng(seed, "gradcheck-triplet");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(check_triplet(&mut rng, batch, dim)?);
    }
    results.push(CheckResult {
        suite: "triplet".into(),
        instances,
        max_rel_err: worst,
    });

    let mut rng = stream_rng(seed, "gradcheck-ce");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(check_cross_entropy(&mut rng, 10)?);
    }
    results.push(CheckResult {
        suite: "cross-entropy".into(),
        instances,
        max_rel_err: worst,
    });

    let mut rng = stream_rng(seed, "gradcheck-end-to-end");
    let mut worst = 0.0f64;
    for _ in 0..instances.min(5) {
        worst = worst.max(check_end_to_end(&mut rng, batch.min(8), dim)?);
    }
    results.push(CheckResult {
        suite: "end-to-end".into(),
        instances: instances.min(5),
        max_rel_err: worst,
    });

    Ok(results)
}
