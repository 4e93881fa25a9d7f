//! Independent oracles shared by the integration suites. Everything here is
//! deliberately written as straight-line brute force, structurally unlike
//! the library implementations it checks.

// Each integration binary compiles its own copy and uses a subset.
#![allow(dead_code)]

use rand::Rng;

/// Average precision for one query by explicit enumeration: sort gallery by
/// (distance, index), walk the ranking, average precision-at-hit.
pub fn ap_oracle(distances: &[f64], relevant: &[bool]) -> Option<f64> {
    let total_relevant = relevant.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &g) in order.iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// CMC curve by explicit enumeration over the same ranking as `ap_oracle`.
pub fn cmc_oracle(all_distances: &[Vec<f64>], all_relevant: &[Vec<bool>]) -> Vec<f64> {
    let n = all_distances[0].len();
    let mut curve = vec![0.0; n];
    let mut counted = 0usize;
    for (distances, relevant) in all_distances.iter().zip(all_relevant) {
        if !relevant.iter().any(|&r| r) {
            continue;
        }
        counted += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            distances[a]
                .partial_cmp(&distances[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let first_hit = order.iter().position(|&g| relevant[g]).unwrap();
        for slot in curve.iter_mut().skip(first_hit) {
            *slot += 1.0;
        }
    }
    for slot in curve.iter_mut() {
        *slot /= counted as f64;
    }
    curve
}

/// Mann-Whitney U statistic normalized to [0,1], ties counted 1/2.
///
/// Probability that a random positive-pair distance ranks below a random
/// negative-pair distance, which equals ROC AUC for the rule "same iff
/// distance < threshold".
pub fn mann_whitney_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p < n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Reference DBSCAN, structured unlike the library's queue expansion:
/// core points from an O(n^2) neighbor count, clusters as connected
/// components of the core-to-core reachability graph (union-find), borders
/// attached to the earliest-created neighboring cluster, then canonical
/// relabeling by smallest member index.
pub fn dbscan_reference(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let dist = |a: usize, b: usize| -> f64 {
        let d2: f64 = points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        0.5 * d2.sqrt()
    };
    let is_core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(i, j) <= eps).count() >= min_pts)
        .collect();

    // Union-find over core points.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        if !is_core[i] {
            continue;
        }
        for j in (i + 1)..n {
            if is_core[j] && dist(i, j) <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    // Cluster creation order = ascending smallest core index per component,
    // which matches index-ordered seed scanning.
    let mut labels = vec![-1i64; n];
    let mut next = 0i64;
    let mut component_label = std::collections::HashMap::new();
    for i in 0..n {
        if is_core[i] {
            let root = find(&mut parent, i);
            let label = *component_label.entry(root).or_insert_with(|| {
                let l = next;
                next += 1;
                l
            });
            labels[i] = label;
        }
    }
    // Borders join the earliest-created cluster among neighboring cores.
    for i in 0..n {
        if is_core[i] {
            continue;
        }
        let best = (0..n)
            .filter(|&j| is_core[j] && dist(i, j) <= eps)
            .map(|j| labels[j])
            .min();
        if let Some(l) = best {
            labels[i] = l;
        }
    }
    canonical(&labels)
}

/// Relabel clusters in order of each cluster's smallest member index.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    let mut next = 0i64;
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                *map.entry(l).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                })
            }
        })
        .collect()
}

/// Random unit vector.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}
