//! Acceptance gate: one test per release criterion (the benchmark
//! criteria 3-5 share a run matrix and live in one test). Each criterion
//! prints a single `criterion N ... PASS|FAIL` line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use gds::clustering::{canonicalize, dbscan};
use gds::config::{LossKind, TrainConfig};
use gds::eval::{cmc_map, roc_pr};
use gds::gradcheck;
use gds::losses::{gds_loss, hard_mining_loss, softplus, LossConfig};
use gds::pipeline::{run_full, RunLog, RunOutcome};
use gds::stats::{batch_moments, momentum_update, pooled_oracle, GaussianStats};

const LN_2: f64 = std::f64::consts::LN_2;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) -> bool {
    println!(
        "criterion {n} ({name}): {} [{detail}]",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

/// Criterion 1: analytic gradients of the separation loss, the triplet
/// loss, cross-entropy, and the end-to-end composition match central
/// finite differences to < 1e-5 relative error in < 30 s.
#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let results = gradcheck::run_all(2024, 20, 16, 8).expect("gradcheck runs");
    let elapsed = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let ok = results.len() == 4 && worst < 1e-5 && elapsed < 30.0;
    let detail = format!("max rel err {worst:.3e} over 4 suites, {elapsed:.1}s");
    assert!(verdict(1, "gradient correctness", ok, &detail));
}

/// Criterion 2: with beta = N/(N+M) one momentum update of a size-N
/// distribution with a size-M batch reproduces the exact pooled moments:
/// the mean to 1e-12, the variance to 1% relative, over 100 random trials.
#[test]
fn criterion_2_statistics_merge_fidelity() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let (n, m) = (10_000usize, 4usize);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for _ in 0..100 {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mean_a = a.iter().sum::<f64>() / n as f64;
        let var_a = a.iter().map(|d| (d - mean_a).powi(2)).sum::<f64>() / n as f64;
        let beta = n as f64 / (n + m) as f64;
        let stats = GaussianStats::with_init(mean_a, var_a, beta);
        let moments = batch_moments(&b, stats.mean).expect("non-empty batch");
        let updated = momentum_update(&stats, &moments);
        let (pool_mean, pool_var) = pooled_oracle(&a, &b).expect("non-empty sets");
        worst_mean = worst_mean.max((updated.mean - pool_mean).abs());
        worst_var = worst_var.max(((updated.variance - pool_var) / pool_var).abs());
    }
    let ok = worst_mean < 1e-12 && worst_var < 0.01;
    let detail =
        format!("100 trials, worst mean err {worst_mean:.2e}, worst var rel err {worst_var:.2e}");
    assert!(verdict(2, "statistics-merge fidelity", ok, &detail));
}

// ---------------------------------------------------------------------------
// Criteria 3-5 share one run matrix over the default benchmark:
// {triplet-only, triplet+gds, triplet+gds-h} x 5 seeds, plus a gds-h arm
// with beta = 0 for the momentum ablation.
// ---------------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct ArmResult {
    map: f64,
    overlap: f64,
    gap_in_sigmas: f64,
    adapt_log: RunLog,
}

fn run_arm(seed: u64, loss: LossKind, beta: f64) -> ArmResult {
    let cfg = TrainConfig {
        seed,
        loss,
        beta,
        ..TrainConfig::default()
    };
    let RunOutcome {
        final_report,
        adapt_log,
        ..
    } = run_full(&cfg, None).expect("benchmark run completes");
    ArmResult {
        map: final_report.map,
        overlap: final_report.separation.empirical_overlap,
        gap_in_sigmas: final_report.separation.gap_in_sigmas,
        adapt_log,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Statistics snapshot index of the last epoch of the first round and of
/// the final epoch (snapshots are pushed once per epoch, in step with the
/// epoch log).
fn trend_indices(log: &RunLog) -> (usize, usize) {
    let first_round = log.epochs.first().map(|e| e.round).unwrap_or(0);
    let end_round_1 = log
        .epochs
        .iter()
        .rposition(|e| e.round == first_round)
        .expect("at least one epoch");
    (end_round_1, log.epochs.len() - 1)
}

#[test]
fn criteria_3_4_5_benchmark_matrix() {
    let matrix_start = Instant::now();
    let mut triplet = Vec::new();
    let mut gds = Vec::new();
    let mut gds_h = Vec::new();
    for &seed in &SEEDS {
        triplet.push(run_arm(seed, LossKind::TripletOnly, 0.99));
        gds.push(run_arm(seed, LossKind::TripletGds, 0.99));
        gds_h.push(run_arm(seed, LossKind::TripletGdsH, 0.99));
    }
    let three_arm_minutes = matrix_start.elapsed().as_secs_f64() / 60.0;
    let gds_h_beta0: Vec<ArmResult> = SEEDS
        .iter()
        .map(|&seed| run_arm(seed, LossKind::TripletGdsH, 0.0))
        .collect();

    let map_of = |arms: &[ArmResult]| -> Vec<f64> { arms.iter().map(|a| a.map).collect() };
    let (m_triplet, m_gds, m_gds_h) = (
        mean(&map_of(&triplet)),
        mean(&map_of(&gds)),
        mean(&map_of(&gds_h)),
    );
    let m_beta0 = mean(&map_of(&gds_h_beta0));

    // Criterion 3: ordering triplet + 2pts <= gds <= gds-h, gds-h >= triplet
    // + 4pts, all in < 15 min.
    let ordering_ok = m_triplet + 0.02 <= m_gds && m_gds <= m_gds_h && m_gds_h >= m_triplet + 0.04;
    let c3 = verdict(
        3,
        "loss-ablation ordering",
        ordering_ok && three_arm_minutes < 15.0,
        &format!(
            "mean mAP over 5 seeds: triplet {m_triplet:.4}, gds {m_gds:.4}, gds-h {m_gds_h:.4}; \
             3-arm matrix {three_arm_minutes:.1} min"
        ),
    );

    // Criterion 4: momentum ablation, beta 0.99 over beta 0 by >= 2 mAP
    // points mean over seeds.
    let c4 = verdict(
        4,
        "momentum ablation",
        m_gds_h >= m_beta0 + 0.02,
        &format!("mean mAP beta=0.99 {m_gds_h:.4} vs beta=0 {m_beta0:.4}"),
    );

    // Criterion 5: separation trend. Per seed: gds-h test-set gap >= 2
    // sigma; gds-h overlap strictly below triplet-only overlap; logged
    // global mean gap grows and both global variances shrink between the
    // end of the first round and the end of training.
    let mut gap_ok = true;
    let mut overlap_ok = true;
    let mut trend_ok = true;
    for (h, t) in gds_h.iter().zip(&triplet) {
        gap_ok &= h.gap_in_sigmas >= 2.0;
        overlap_ok &= h.overlap < t.overlap;
        let (r1, last) = trend_indices(&h.adapt_log);
        let s1 = &h.adapt_log.stats[r1];
        let s_end = &h.adapt_log.stats[last];
        trend_ok &= (s_end.neg.mean - s_end.pos.mean) > (s1.neg.mean - s1.pos.mean);
        trend_ok &= s_end.pos.var < s1.pos.var && s_end.neg.var < s1.neg.var;
    }
    let min_gap = gds_h
        .iter()
        .map(|a| a.gap_in_sigmas)
        .fold(f64::INFINITY, f64::min);
    let c5 = verdict(
        5,
        "separation trend",
        gap_ok && overlap_ok && trend_ok,
        &format!(
            "min gap {min_gap:.2} sigma (need >= 2), overlap below triplet on all seeds: \
             {overlap_ok}, mean-gap up / variances down: {trend_ok}"
        ),
    );

    assert!(c3 && c4 && c5, "benchmark criteria failed (see lines above)");
}

/// Criterion 6: ranking metrics, AUC, and density clustering against
/// independent brute-force oracles.
#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha12Rng::seed_from_u64(6006);

    // mAP / CMC vs explicit enumeration on 200 random instances.
    let mut worst_rank = 0.0f64;
    for _ in 0..200 {
        let n_query = rng.gen_range(2..7);
        let n_gallery = rng.gen_range(3..11);
        let labels = |rng: &mut ChaCha12Rng, n: usize| -> Vec<usize> {
            (0..n).map(|_| rng.gen_range(0..4usize)).collect()
        };
        let q_labels = labels(&mut rng, n_query);
        let mut g_labels = labels(&mut rng, n_gallery);
        // Guarantee at least one query has a positive.
        g_labels[0] = q_labels[0];
        let dist: Vec<Vec<f64>> = (0..n_query)
            .map(|_| {
                (0..n_gallery)
                    // Coarse grid so exact ties are common and the
                    // tie-breaking rules are actually exercised.
                    .map(|_| rng.gen_range(0..16) as f64 / 16.0)
                    .collect()
            })
            .collect();
        let (map, cmc, skipped) = cmc_map(&dist, &q_labels, &g_labels, false).expect("valid");

        let relevant: Vec<Vec<bool>> = (0..n_query)
            .map(|q| g_labels.iter().map(|&g| g == q_labels[q]).collect())
            .collect();
        let aps: Vec<f64> = (0..n_query)
            .filter_map(|q| common::ap_oracle(&dist[q], &relevant[q]))
            .collect();
        let oracle_map = aps.iter().sum::<f64>() / aps.len() as f64;
        let oracle_cmc = common::cmc_oracle(&dist, &relevant);
        assert_eq!(skipped, n_query - aps.len());
        worst_rank = worst_rank.max((map - oracle_map).abs());
        assert_eq!(cmc.len(), oracle_cmc.len());
        for (a, b) in cmc.iter().zip(&oracle_cmc) {
            worst_rank = worst_rank.max((a - b).abs());
        }
    }

    // ROC AUC vs the Mann-Whitney statistic on 100 random instances.
    let mut worst_auc = 0.0f64;
    for _ in 0..100 {
        let np = rng.gen_range(2..40);
        let nn = rng.gen_range(2..40);
        let draw = |rng: &mut ChaCha12Rng, n: usize, lo: f64| -> Vec<f64> {
            (0..n)
                .map(|_| lo + rng.gen_range(0..24) as f64 / 32.0)
                .collect()
        };
        let pos = draw(&mut rng, np, 0.0);
        let neg = draw(&mut rng, nn, 0.25);
        let mut all = pos.clone();
        all.extend(&neg);
        let mut flags = vec![true; np];
        flags.extend(std::iter::repeat(false).take(nn));
        let (_, _, auc) = roc_pr(&all, &flags).expect("valid");
        worst_auc = worst_auc.max((auc - common::mann_whitney_auc(&pos, &neg)).abs());
    }

    // DBSCAN vs the union-find reference on 100 random blob instances.
    let mut dbscan_mismatch = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(20..=200);
        let dim = rng.gen_range(2..6);
        let blobs = rng.gen_range(1..6);
        let noise = rng.gen_range(0.02..0.25);
        let centers: Vec<Vec<f64>> = (0..blobs).map(|_| common::random_unit(dim, &mut rng)).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[rng.gen_range(0..blobs)];
                let v: Vec<f64> = c
                    .iter()
                    .map(|x| x + noise * rng.gen_range(-1.0..1.0))
                    .collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect();
        let eps = rng.gen_range(0.02..0.4);
        let min_pts = rng.gen_range(1..=6);
        let ours = dbscan(&points, eps, min_pts).expect("valid input");
        let reference = common::dbscan_reference(&points, eps, min_pts);
        if canonicalize(&ours.labels).labels != reference {
            dbscan_mismatch += 1;
        }
    }

    let ok = worst_rank < 1e-12 && worst_auc < 1e-9 && dbscan_mismatch == 0;
    let detail = format!(
        "rank err {worst_rank:.1e} (200 instances), auc err {worst_auc:.1e} (100), \
         dbscan mismatches {dbscan_mismatch}/100"
    );
    assert!(verdict(6, "metric oracles", ok, &detail));
}

/// Criterion 7: closed-form loss values to 1e-12.
#[test]
fn criterion_7_closed_form_losses() {
    let stats = |mean: f64, variance: f64| GaussianStats {
        mean,
        variance,
        momentum: 0.99,
        count_seen: 1,
    };
    let cfg = LossConfig::default(); // lambda_sigma = 1, kappa = 3
    let mut worst = 0.0f64;
    let mut check = |value: f64, expect: f64| worst = worst.max((value - expect).abs());

    // softplus: ln 2 at zero, linear asymptote, exponential tail.
    check(softplus(0.0), LN_2);
    check(softplus(50.0), 50.0);
    check(softplus(-50.0), (-50.0f64).exp());
    assert!(softplus(-50.0) > 0.0);

    // gds_loss: zero-gap/zero-variance; pure mean-gap; lambda_sigma = 0
    // ignores the variances.
    check(gds_loss(&stats(0.5, 0.0), &stats(0.5, 0.0), &cfg), LN_2);
    check(
        gds_loss(&stats(0.2, 0.0), &stats(0.8, 0.0), &cfg),
        (1.0 + (-0.6f64).exp()).ln(),
    );
    let no_sigma = LossConfig {
        lambda_sigma: 0.0,
        ..cfg
    };
    check(
        gds_loss(&stats(0.2, 0.3), &stats(0.8, 0.7), &no_sigma),
        (1.0 + (-0.6f64).exp()).ln(),
    );
    assert!((gds_loss(&stats(0.2, 0.0), &stats(0.8, 0.0), &cfg) - 0.4375).abs() < 1e-4);

    // hard_mining_loss: tails exactly touching; degenerate variances; the
    // kappa = 3 worked example.
    check(
        hard_mining_loss(&stats(0.2, 0.01), &stats(0.8, 0.01), &cfg),
        LN_2,
    );
    check(
        hard_mining_loss(&stats(0.3, 0.0), &stats(0.7, 0.0), &cfg),
        (1.0 + (-0.4f64).exp()).ln(),
    );
    check(
        hard_mining_loss(&stats(0.3, 0.0025), &stats(0.7, 0.0025), &cfg),
        (1.0 + (-0.1f64).exp()).ln(),
    );
    assert!(
        (hard_mining_loss(&stats(0.3, 0.0025), &stats(0.7, 0.0025), &cfg) - 0.6444).abs() < 1e-4
    );

    let ok = worst < 1e-12;
    assert!(verdict(
        7,
        "closed-form losses",
        ok,
        &format!("worst abs err {worst:.1e}")
    ));
}
