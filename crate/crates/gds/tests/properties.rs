//! Randomized invariants over the clustering, statistics, and evaluation
//! primitives, checked against the brute-force oracles in `common`.

mod common;

use proptest::prelude::*;

use gds::clustering::{canonicalize, dbscan};
use gds::eval::pair_distance_lists;
use gds::losses::softplus;
use gds::stats::{batch_moments, momentum_update, GaussianStats};

/// Small sets of unit vectors with loose blob structure.
fn unit_points(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=max_n, 2usize..=4).prop_flat_map(|(n, dim)| {
        proptest::collection::vec(
            proptest::collection::vec(-1.0f64..1.0, dim).prop_filter_map(
                "non-degenerate direction",
                |v| {
                    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (norm > 1e-3).then(|| v.iter().map(|x| x / norm).collect::<Vec<f64>>())
                },
            ),
            n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The queue-expansion DBSCAN agrees with the union-find reference on
    /// every input after canonical relabeling.
    #[test]
    fn dbscan_matches_union_find_reference(
        points in unit_points(40),
        eps in 0.01f64..0.8,
        min_pts in 1usize..6,
    ) {
        let ours = dbscan(&points, eps, min_pts).unwrap();
        let reference = common::dbscan_reference(&points, eps, min_pts);
        prop_assert_eq!(canonicalize(&ours.labels).labels, reference);
    }

    /// Canonical relabeling is idempotent and keeps noise markers.
    #[test]
    fn canonicalize_is_idempotent(labels in proptest::collection::vec(-1i64..5, 0..30)) {
        let once = canonicalize(&labels);
        let twice = canonicalize(&once.labels);
        prop_assert_eq!(&once.labels, &twice.labels);
        prop_assert_eq!(once.cluster_count, twice.cluster_count);
        for (&orig, &mapped) in labels.iter().zip(&once.labels) {
            prop_assert_eq!(orig < 0, mapped < 0);
        }
    }

    /// Same-label and cross-label pair lists partition all n(n-1)/2 pairs.
    #[test]
    fn pair_lists_partition_all_pairs(
        points in unit_points(20),
        label_mod in 1usize..5,
    ) {
        let labels: Vec<usize> = (0..points.len()).map(|i| i % label_mod).collect();
        let (pos, neg) = pair_distance_lists(&points, &labels).unwrap();
        let n = points.len();
        prop_assert_eq!(pos.len() + neg.len(), n * (n - 1) / 2);
        prop_assert!(pos.iter().chain(&neg).all(|&d| (0.0..=1.0).contains(&d)));
    }

    /// The EMA mean never leaves the convex hull of its initialization and
    /// the absorbed batch means.
    #[test]
    fn ema_mean_stays_in_convex_hull(
        init in 0.0f64..1.0,
        beta in 0.0f64..0.999,
        batches in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 1..8), 1..20),
    ) {
        let mut s = GaussianStats::with_init(init, 0.1, beta);
        let mut lo = init;
        let mut hi = init;
        for batch in &batches {
            let m = batch_moments(batch, s.mean).unwrap();
            lo = lo.min(m.local_mean);
            hi = hi.max(m.local_mean);
            s = momentum_update(&s, &m);
            prop_assert!(s.mean >= lo - 1e-12 && s.mean <= hi + 1e-12);
            prop_assert!(s.variance >= 0.0);
        }
    }

    /// Softplus is positive, increasing, and bounded below by max(x, 0).
    #[test]
    fn softplus_shape(x in -700.0f64..700.0, dx in 0.001f64..10.0) {
        let y = softplus(x);
        prop_assert!(y > 0.0 && y.is_finite());
        prop_assert!(y >= x.max(0.0));
        prop_assert!(softplus(x + dx) > y);
    }
}
