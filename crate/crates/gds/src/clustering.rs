//! Pseudo-label assignment for unlabeled target embeddings: DBSCAN
//! (default) or K-means, both over the same half-Euclidean distance the
//! losses use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::pair_distance;

/// Cluster labels per point; -1 marks noise. Non-noise labels are
/// contiguous `0..cluster_count`, ordered by smallest member index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
    pub cluster_count: usize,
}

/// Canonical DBSCAN with index-order expansion.
///
/// Core point: at least `min_pts` points (itself included) within `eps`.
/// Border points join the first core cluster that reaches them; everything
/// else is noise.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if eps <= 0.0 {
        return Err(Error::InvalidInput("dbscan: eps must be positive".into()));
    }
    if min_pts == 0 {
        return Err(Error::InvalidInput("dbscan: min_pts must be >= 1".into()));
    }
    let n = points.len();
    if n == 0 {
        return Ok(ClusterAssignment {
            labels: vec![],
            cluster_count: 0,
        });
    }

    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| region_query(points, i, eps))
        .collect::<Result<_>>()?;

    const UNVISITED: i64 = -2;
    const NOISE: i64 = -1;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i64;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        if neighbors[i].len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster; // border point
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            if neighbors[j].len() >= min_pts {
                queue.extend(neighbors[j].iter());
            }
        }
        cluster += 1;
    }
    Ok(canonicalize(&labels))
}

fn region_query(points: &[Vec<f64>], i: usize, eps: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (j, p) in points.iter().enumerate() {
        if pair_distance(&points[i], p)? <= eps {
            out.push(j);
        }
    }
    Ok(out)
}

/// Relabel clusters by order of their smallest member index so output is
/// independent of expansion order.
pub fn canonicalize(labels: &[i64]) -> ClusterAssignment {
    let mut mapping: std::collections::HashMap<i64, i64> = std::collections::HashMap::new();
    let mut next = 0i64;
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        if l < 0 {
            out.push(-1);
            continue;
        }
        let mapped = *mapping.entry(l).or_insert_with(|| {
            let v = next;
            next += 1;
            v
        });
        out.push(mapped);
    }
    ClusterAssignment {
        labels: out,
        cluster_count: next as usize,
    }
}

/// Lloyd's algorithm with seeded k-means++ initialization. Assignments use
/// plain Euclidean distance, which induces the same partition as the pair
/// distance on unit vectors.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "kmeans: k = {k} out of range for {n} points"
        )));
    }
    let dim = points[0].len();

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut dist2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (d, p) in dist2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..max_iters {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(p, cen)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            labels[i] = best;
            inertia += d;
        }
        debug_assert!(inertia <= prev_inertia + 1e-9);
        if (prev_inertia - inertia).abs() < 1e-12 {
            break;
        }
        prev_inertia = inertia;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if count > 0 {
                *c = sum.iter().map(|v| v / count as f64).collect();
            }
        }
    }
    let as_i64: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    Ok(canonicalize(&as_i64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pick eps as the p-th quantile of the pairwise distance distribution.
/// Self-tuning across rounds as the embedding scale drifts.
pub fn select_eps(points: &[Vec<f64>], percentile: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("select_eps: need >= 2 points".into()));
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            dists.push(pair_distance(&points[i], &points[j])?);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((dists.len() as f64 - 1.0) * percentile.clamp(0.0, 1.0)).round() as usize;
    let eps = dists[idx];
    if eps <= 0.0 {
        // All candidate distances at the percentile are zero; fall back to
        // the smallest positive distance so DBSCAN stays well-defined.
        return Ok(dists
            .iter()
            .copied()
            .find(|&d| d > 0.0)
            .unwrap_or(f64::MIN_POSITIVE));
    }
    Ok(eps)
}

/// Keep samples whose cluster is non-noise and has at least
/// `min_cluster_size` members; relabel kept clusters contiguously.
/// Returns `(original_index, pseudo_label)` pairs.
pub fn pseudo_label_filter(
    assignment: &ClusterAssignment,
    min_cluster_size: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut sizes: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
    for &l in &assignment.labels {
        if l >= 0 {
            *sizes.entry(l).or_default() += 1;
        }
    }
    let mut relabel: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, &l) in assignment.labels.iter().enumerate() {
        if l < 0 || sizes[&l] < min_cluster_size {
            continue;
        }
        let next = relabel.len();
        let mapped = *relabel.entry(l).or_insert(next);
        out.push((i, mapped));
    }
    if out.is_empty() {
        return Err(Error::NoUsableClusters);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit2(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn two_blobs_two_clusters() {
        // Two tight arcs on the unit circle.
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(unit2(0.02 * i as f64));
        }
        for i in 0..6 {
            pts.push(unit2(std::f64::consts::PI + 0.02 * i as f64));
        }
        let a = dbscan(&pts, 0.05, 3).unwrap();
        assert_eq!(a.cluster_count, 2);
        assert!(a.labels.iter().all(|&l| l >= 0));
        assert!(a.labels[..6].iter().all(|&l| l == 0));
        assert!(a.labels[6..].iter().all(|&l| l == 1));
    }

    #[test]
    fn isolated_points_are_noise() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| unit2(1.2 * i as f64)).collect();
        let a = dbscan(&pts, 0.01, 2).unwrap();
        assert_eq!(a.cluster_count, 0);
        assert!(a.labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn single_point_min_pts_one() {
        let a = dbscan(&[unit2(0.3)], 0.1, 1).unwrap();
        assert_eq!(a.cluster_count, 1);
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn empty_input_is_empty_assignment() {
        let a = dbscan(&[], 0.1, 2).unwrap();
        assert_eq!(a.cluster_count, 0);
        assert!(a.labels.is_empty());
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| unit2(1.0 * i as f64)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = kmeans(&pts, 4, 50, &mut rng).unwrap();
        assert_eq!(a.cluster_count, 4);
        let mut ls = a.labels.clone();
        ls.sort_unstable();
        ls.dedup();
        assert_eq!(ls.len(), 4);
    }

    #[test]
    fn kmeans_two_blobs_are_pure() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(unit2(0.03 * i as f64));
        }
        for i in 0..8 {
            pts.push(unit2(std::f64::consts::PI + 0.03 * i as f64));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = kmeans(&pts, 2, 100, &mut rng).unwrap();
        assert_eq!(a.cluster_count, 2);
        assert!(a.labels[..8].iter().all(|&l| l == a.labels[0]));
        assert!(a.labels[8..].iter().all(|&l| l == a.labels[8]));
        assert_ne!(a.labels[0], a.labels[8]);
    }

    #[test]
    fn kmeans_is_reproducible_and_validates_k() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| unit2(0.5 * i as f64)).collect();
        let a = kmeans(&pts, 3, 50, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let b = kmeans(&pts, 3, 50, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(kmeans(&pts, 11, 50, &mut ChaCha12Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn filter_keeps_large_clusters_only() {
        let a = ClusterAssignment {
            labels: vec![0, 0, 0, 0, 1, 1, -1, 2, 2, 2, 2, 2],
            cluster_count: 3,
        };
        let kept = pseudo_label_filter(&a, 4).unwrap();
        // Clusters 0 (4 members) and 2 (5 members) survive; cluster 1 and
        // the noise point are dropped.
        assert_eq!(kept.len(), 9);
        let labels: std::collections::BTreeSet<usize> = kept.iter().map(|&(_, l)| l).collect();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn filter_all_noise_is_error() {
        let a = ClusterAssignment {
            labels: vec![-1, -1, -1],
            cluster_count: 0,
        };
        assert!(matches!(
            pseudo_label_filter(&a, 2),
            Err(Error::NoUsableClusters)
        ));
    }

    #[test]
    fn filter_no_noise_keeps_everything() {
        let a = ClusterAssignment {
            labels: vec![0, 0, 1, 1],
            cluster_count: 2,
        };
        let kept = pseudo_label_filter(&a, 2).unwrap();
        assert_eq!(kept.len(), 4);
    }
}
