//! Three-stage training orchestration: supervised pretraining on the
//! source domain, then alternating rounds of clustering-based
//! pseudo-labeling and adaptation on the target domain.
//!
//! The global distance statistics live here: one positive and one negative
//! [`GaussianStats`] owned by the single-writer training loop, updated once
//! per batch, persisting across batches, epochs, and rounds (a reset mode
//! exists for comparison).

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterAssignment};
use crate::config::{ClusteringConfig, LossKind, TrainConfig, stream_rng};
use crate::data::{
    self, enumerate_pairs, Domain, IdentityIndex, LabeledDataset, PkBatch,
};
use crate::embedder::{
    adam_step, backward, classifier_backward, classifier_logits, forward, save_checkpoint,
    MlpParams,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_test_set, EvalReport};
use crate::losses::{
    self, cross_entropy, gds_h_loss, triplet_batch_hard, LossConfig,
};
use crate::stats::{batch_moments, momentum_update, GaussianStats, StatsSnapshot};

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;
/// Abort after this many consecutive rounds without usable clusters.
const MAX_CLUSTER_FAILURES: usize = 3;

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    /// Global batch counter at the end of the epoch.
    pub step: u64,
    pub triplet: f64,
    pub gds: f64,
    pub hard: f64,
    pub total: f64,
}

/// Per-round clustering and evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub cluster_count: usize,
    pub kept_samples: usize,
    pub reused_previous_labels: bool,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub stats: Vec<StatsSnapshot>,
    pub rounds: Vec<RoundLog>,
}

/// The synthetic benchmark: a labeled source domain plus a target domain
/// split into adaptation-train and held-out test.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
}

pub fn build_benchmark(cfg: &TrainConfig) -> Result<Benchmark> {
    let d = &cfg.data;
    let source = data::generate_domain(
        d.identities,
        d.samples_per_identity,
        d.dim,
        d.cluster_spread,
        d.center_scale,
        d.groups,
        d.group_scale,
        None,
        Domain::Source,
        &mut stream_rng(cfg.seed, "data-source"),
        cfg.seed,
    )?;
    let target = data::generate_domain(
        d.identities,
        d.samples_per_identity,
        d.dim,
        d.cluster_spread,
        d.center_scale,
        d.groups,
        d.group_scale,
        Some(&d.shift),
        Domain::Target,
        &mut stream_rng(cfg.seed, "data-target"),
        cfg.seed,
    )?;
    let (target_train, target_test) = data::split_by_identity(
        &target,
        d.train_frac,
        &mut stream_rng(cfg.seed, "data-split"),
    );
    Ok(Benchmark {
        source,
        target,
        target_train,
        target_test,
    })
}

fn gather<'a>(ds: &'a LabeledDataset, indices: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let feats = indices.iter().map(|&i| ds.samples[i].features.clone()).collect();
    let labels = indices.iter().map(|&i| ds.samples[i].identity).collect();
    (feats, labels)
}

fn batch_inputs(ds: &LabeledDataset, batch: &PkBatch) -> Vec<Vec<f64>> {
    batch
        .indices
        .iter()
        .map(|&i| ds.samples[i].features.clone())
        .collect()
}

/// Stage 1: supervised pretraining on the labeled source domain with
/// classification + batch-hard triplet losses. The classifier head is
/// discarded from the returned params.
pub fn pretrain_source(cfg: &TrainConfig, source: &LabeledDataset) -> Result<(MlpParams, RunLog)> {
    let mut params = MlpParams::init(
        cfg.mlp,
        Some(source.identity_count),
        &mut stream_rng(cfg.seed, "init"),
    );
    let mut sampler = stream_rng(cfg.seed, "sampler-stage1");
    let index = IdentityIndex::from_dataset(source);
    let p_eff = cfg.p.min(source.identity_count);
    let batches_per_epoch =
        (source.samples.len() + cfg.p * cfg.k - 1) / (cfg.p * cfg.k);
    let mut log = RunLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.stage1_epochs {
        let mut total = 0.0;
        let mut triplet_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let batch = data::pk_sample(&index, p_eff, cfg.k, &mut sampler)?;
            let inputs = batch_inputs(source, &batch);
            let (embeddings, trace) = forward(&params, &inputs)?;

            let triplet = triplet_batch_hard(&embeddings, &batch.labels)?;
            let logits = classifier_logits(&params, &embeddings)?;
            let mut ce_value = 0.0;
            let mut grad_logits = Vec::with_capacity(logits.len());
            for (row, &label) in logits.iter().zip(&batch.labels) {
                let (v, g) = cross_entropy(row, label)?;
                ce_value += v;
                grad_logits.push(g);
            }
            ce_value /= logits.len() as f64;
            let scale = 1.0 / logits.len() as f64;
            for g in grad_logits.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let (clf_grad, ce_emb_grad) = classifier_backward(&params, &embeddings, &grad_logits)?;

            let value = triplet.value + ce_value;
            if !value.is_finite() {
                return Err(Error::NonFinite("stage-1 loss".into()));
            }
            let upstream: Vec<Vec<f64>> = triplet
                .grad_embeddings
                .iter()
                .zip(&ce_emb_grad)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect();
            let (mut grads, _) = backward(&params, &trace, &upstream)?;
            grads.classifier = Some(clf_grad);
            adam_step(&mut params, &grads, cfg.stage1_lr, ADAM_BETAS, ADAM_EPS)?;
            step += 1;
            total += value;
            triplet_sum += triplet.value;
        }
        log.epochs.push(EpochLog {
            round: 0,
            epoch,
            step,
            triplet: triplet_sum / batches_per_epoch as f64,
            gds: 0.0,
            hard: 0.0,
            total: total / batches_per_epoch as f64,
        });
    }
    params.discard_classifier();
    Ok((params, log))
}

fn effective_loss_cfg(cfg: &TrainConfig) -> LossConfig {
    match cfg.loss {
        LossKind::TripletGds => LossConfig {
            lambda_h: 0.0,
            ..cfg.loss_cfg
        },
        _ => cfg.loss_cfg,
    }
}

fn cluster_embeddings(
    cfg: &TrainConfig,
    points: &[Vec<f64>],
    round: usize,
) -> Result<ClusterAssignment> {
    match cfg.clustering {
        ClusteringConfig::Dbscan {
            eps_percentile,
            eps_override,
            min_pts,
        } => {
            let eps = match eps_override {
                Some(e) => e,
                None => clustering::select_eps(points, eps_percentile)?,
            };
            clustering::dbscan(points, eps, min_pts)
        }
        ClusteringConfig::Kmeans { k, max_iters } => {
            let k = k.unwrap_or(cfg.data.identities).min(points.len());
            let mut rng = stream_rng(cfg.seed, &format!("kmeans-round-{round}"));
            clustering::kmeans(points, k, max_iters, &mut rng)
        }
    }
}

/// Stages 2-3: alternate clustering and adaptation for `rounds` rounds.
pub fn adapt_target(
    cfg: &TrainConfig,
    mut params: MlpParams,
    bench: &Benchmark,
    run_dir: Option<&Path>,
) -> Result<(MlpParams, RunLog)> {
    let loss_cfg = effective_loss_cfg(cfg);
    let mut pos_stats = GaussianStats::new(cfg.beta);
    let mut neg_stats = GaussianStats::new(cfg.beta);
    let mut sampler = stream_rng(cfg.seed, "sampler-adapt");
    let mut eval_rng = stream_rng(cfg.seed, "eval");
    let mut log = RunLog::default();
    let mut step = 0u64;
    let mut previous_labels: Option<Vec<(usize, usize)>> = None;
    let mut consecutive_failures = 0usize;

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::create_dir_all(dir.join("clusters"))?;
        std::fs::create_dir_all(dir.join("eval"))?;
        std::fs::create_dir_all(dir.join("logs"))?;
    }

    for round in 0..cfg.rounds {
        if cfg.reset_stats_each_round {
            pos_stats = GaussianStats::new(cfg.beta);
            neg_stats = GaussianStats::new(cfg.beta);
        }
        // Clustering pass over the adaptation-train embeddings.
        let (train_feats, _) = gather(&bench.target, &bench.target_train);
        let (train_emb, _) = forward(&params, &train_feats)?;
        let assignment = cluster_embeddings(cfg, &train_emb, round)?;
        let mut reused = false;
        // A usable labeling needs at least two surviving clusters, or PK
        // batches cannot contain negative pairs.
        let filtered = clustering::pseudo_label_filter(&assignment, cfg.k).and_then(|kept| {
            if kept.iter().map(|&(_, l)| l).max().unwrap_or(0) < 1 {
                return Err(Error::NoUsableClusters);
            }
            Ok(kept)
        });
        let labeled: Vec<(usize, usize)> = match filtered {
            Ok(kept) => {
                consecutive_failures = 0;
                // Map positions within target_train back to dataset indices.
                kept.into_iter()
                    .map(|(pos, label)| (bench.target_train[pos], label))
                    .collect()
            }
            Err(Error::NoUsableClusters) => match &previous_labels {
                Some(prev) => {
                    consecutive_failures += 1;
                    if consecutive_failures >= MAX_CLUSTER_FAILURES {
                        return Err(Error::NoUsableClusters);
                    }
                    reused = true;
                    prev.clone()
                }
                None => return Err(Error::NoUsableClusters),
            },
            Err(e) => return Err(e),
        };
        previous_labels = Some(labeled.clone());

        if let Some(dir) = run_dir {
            let mut f = std::fs::File::create(
                dir.join("clusters").join(format!("round_{round}.csv")),
            )?;
            writeln!(f, "sample_index,pseudo_label")?;
            for (idx, label) in &labeled {
                writeln!(f, "{idx},{label}")?;
            }
        }

        let index = IdentityIndex::from_labels(&labeled);
        let p_eff = cfg.p.min(index.groups.len());
        let batches_per_epoch =
            ((labeled.len() + cfg.p * cfg.k - 1) / (cfg.p * cfg.k)).max(1);

        for epoch in 0..cfg.epochs_per_round {
            let mut triplet_sum = 0.0;
            let mut gds_sum = 0.0;
            let mut hard_sum = 0.0;
            let mut total_sum = 0.0;
            for _ in 0..batches_per_epoch {
                let batch = data::pk_sample(&index, p_eff, cfg.k, &mut sampler)?;
                let inputs = batch_inputs(&bench.target, &batch);
                let (embeddings, trace) = forward(&params, &inputs)?;
                let triplet = triplet_batch_hard(&embeddings, &batch.labels)?;
                let mut upstream = triplet.grad_embeddings.clone();
                let mut total = triplet.value;
                let (pos_pairs, neg_pairs) = enumerate_pairs(&batch);

                if cfg.loss == LossKind::TripletOnly {
                    // Statistics are still maintained for the trend logs.
                    update_stats_only(
                        &embeddings,
                        &pos_pairs,
                        &neg_pairs,
                        &mut pos_stats,
                        &mut neg_stats,
                    )?;
                } else {
                    match gds_h_loss(
                        &embeddings,
                        &pos_pairs,
                        &neg_pairs,
                        &pos_stats,
                        &neg_stats,
                        &loss_cfg,
                    ) {
                        Ok((out, new_pos, new_neg)) => {
                            gds_sum += losses::gds_loss(&new_pos, &new_neg, &loss_cfg);
                            hard_sum += losses::hard_mining_loss(&new_pos, &new_neg, &loss_cfg);
                            pos_stats = new_pos;
                            neg_stats = new_neg;
                            if step >= cfg.warmup_batches as u64 {
                                total += cfg.gds_weight * out.value;
                                for (u, g) in upstream.iter_mut().zip(&out.grad_embeddings) {
                                    for (uv, gv) in u.iter_mut().zip(g) {
                                        *uv += cfg.gds_weight * gv;
                                    }
                                }
                            }
                        }
                        Err(Error::DegenerateBatch(_)) => {
                            // Skip the separation term for this batch.
                        }
                        Err(e) => return Err(e),
                    }
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite("adaptation loss".into()));
                }
                let (grads, _) = backward(&params, &trace, &upstream)?;
                adam_step(&mut params, &grads, cfg.stage3_lr, ADAM_BETAS, ADAM_EPS)?;
                step += 1;
                triplet_sum += triplet.value;
                total_sum += total;
            }
            let nb = batches_per_epoch as f64;
            log.epochs.push(EpochLog {
                round,
                epoch,
                step,
                triplet: triplet_sum / nb,
                gds: gds_sum / nb,
                hard: hard_sum / nb,
                total: total_sum / nb,
            });
            log.stats.push(StatsSnapshot::capture(&pos_stats, &neg_stats, step));
        }

        let report = evaluate_round(cfg, &params, bench, &mut eval_rng)?;
        log.rounds.push(RoundLog {
            round,
            cluster_count: assignment.cluster_count,
            kept_samples: labeled.len(),
            reused_previous_labels: reused,
            map: report.map,
            rank1: report.rank1,
        });
        if let Some(dir) = run_dir {
            save_checkpoint(&params, &dir.join("checkpoints").join(format!("round_{round}.bin")))?;
            let f = std::fs::File::create(dir.join("eval").join(format!("round_{round}.json")))?;
            serde_json::to_writer_pretty(f, &report)?;
        }
    }

    if let Some(dir) = run_dir {
        write_logs(dir, &log)?;
    }
    Ok((params, log))
}

fn update_stats_only(
    embeddings: &[Vec<f64>],
    pos_pairs: &[(usize, usize)],
    neg_pairs: &[(usize, usize)],
    pos_stats: &mut GaussianStats,
    neg_stats: &mut GaussianStats,
) -> Result<()> {
    for (pairs, stats) in [(pos_pairs, pos_stats), (neg_pairs, neg_stats)] {
        if pairs.is_empty() {
            continue;
        }
        let d: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| losses::pair_distance(&embeddings[a], &embeddings[b]))
            .collect::<Result<_>>()?;
        let m = batch_moments(&d, stats.mean)?;
        *stats = momentum_update(stats, &m);
    }
    Ok(())
}

/// Evaluate current params on the held-out target test split.
pub fn evaluate_round(
    _cfg: &TrainConfig,
    params: &MlpParams,
    bench: &Benchmark,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    let (test_feats, test_labels) = gather(&bench.target, &bench.target_test);
    let (test_emb, _) = forward(params, &test_feats)?;
    evaluate_test_set(&test_emb, &test_labels, rng, false)
}

fn write_logs(dir: &Path, log: &RunLog) -> Result<()> {
    let mut f = std::fs::File::create(dir.join("logs").join("epochs.csv"))?;
    writeln!(f, "round,epoch,step,triplet,gds,hard,total")?;
    for e in &log.epochs {
        writeln!(
            f,
            "{},{},{},{:?},{:?},{:?},{:?}",
            e.round, e.epoch, e.step, e.triplet, e.gds, e.hard, e.total
        )?;
    }
    let f = std::fs::File::create(dir.join("logs").join("stats.json"))?;
    serde_json::to_writer_pretty(f, &log.stats)?;
    let f = std::fs::File::create(dir.join("logs").join("rounds.json"))?;
    serde_json::to_writer_pretty(f, &log.rounds)?;
    Ok(())
}

/// Outcome of a full three-stage run.
#[derive(Debug)]
pub struct RunOutcome {
    pub params: MlpParams,
    pub pretrain_log: RunLog,
    pub adapt_log: RunLog,
    pub direct_transfer: EvalReport,
    pub final_report: EvalReport,
}

/// Pretrain on source, measure direct transfer, adapt on target.
pub fn run_full(cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("config.json"))?;
        serde_json::to_writer_pretty(f, cfg)?;
    }
    let bench = build_benchmark(cfg)?;
    let (params, pretrain_log) = pretrain_source(cfg, &bench.source)?;
    let mut rng = stream_rng(cfg.seed, "eval-direct");
    let direct_transfer = evaluate_round(cfg, &params, &bench, &mut rng)?;
    let (params, adapt_log) = adapt_target(cfg, params, &bench, run_dir)?;
    let mut rng = stream_rng(cfg.seed, "eval-final");
    let final_report = evaluate_round(cfg, &params, &bench, &mut rng)?;
    Ok(RunOutcome {
        params,
        pretrain_log,
        adapt_log,
        direct_transfer,
        final_report,
    })
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub map: f64,
    pub rank1: f64,
}

/// Run the full pipeline once per parameter value, sharing all seeds, and
/// collect final target-test metrics.
pub fn ablation_sweep(
    base: &TrainConfig,
    parameter: &str,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for value in values {
        let mut cfg = base.clone();
        apply_sweep_value(&mut cfg, parameter, value)?;
        let outcome = run_full(&cfg, None)?;
        rows.push(SweepRow {
            parameter: parameter.to_string(),
            value: value.clone(),
            map: outcome.final_report.map,
            rank1: outcome.final_report.rank1,
        });
    }
    Ok(rows)
}

fn apply_sweep_value(cfg: &mut TrainConfig, parameter: &str, value: &str) -> Result<()> {
    let parse = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("bad sweep value '{v}'")))
    };
    match parameter {
        "beta" => cfg.beta = parse(value)?,
        "kappa" => cfg.loss_cfg.kappa = parse(value)?,
        "lambda_h" => cfg.loss_cfg.lambda_h = parse(value)?,
        "lambda_sigma" => cfg.loss_cfg.lambda_sigma = parse(value)?,
        "clustering" => {
            cfg.clustering = match value {
                "dbscan" => ClusteringConfig::default(),
                "kmeans" => ClusteringConfig::Kmeans {
                    k: None,
                    max_iters: 100,
                },
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown clustering '{other}'"
                    )))
                }
            };
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown sweep parameter '{other}'"
            )))
        }
    }
    Ok(())
}
