//! k-means document clustering and partition agreement scores.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trainer::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, m)| (c, sq_dist(p, m)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding; stops early when every point already sits on a center.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (c, _) = nearest(p, &centroids);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..centroids.len() {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // an emptied cluster takes the point farthest from its center
                let far = points
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| sq_dist(p, &centroids[l]))
                    .enumerate()
                    .fold((0, -1.0), |b, cur| if cur.1 > b.1 { cur } else { b })
                    .0;
                centroids[c] = points[far].clone();
            }
        }
    }
    let wcss = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    KMeans {
        labels,
        centroids,
        wcss,
    }
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, max_iter: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && points.len() >= k, "need at least {k} points");
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let centroids = seed_centroids(points, k, &mut rng);
        if centroids.len() == 1 && k > 1 {
            log::warn!("all {} points coincide; returning a single cluster", points.len());
        }
        let run = lloyd(points, centroids, max_iter);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

/// Maximum-weight perfect matching on a square matrix; returns the column
/// assigned to each row.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    // Hungarian algorithm with potentials on the cost −weight, 1-indexed.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn confusion(pred: &[usize], truth: &[usize]) -> (Vec<Vec<f64>>, usize, usize) {
    assert_eq!(pred.len(), truth.len(), "label vectors differ in length");
    let (p, np) = relabel(pred);
    let (t, nt) = relabel(truth);
    let mut m = vec![vec![0.0; nt]; np];
    for (&a, &b) in p.iter().zip(&t) {
        m[a][b] += 1.0;
    }
    (m, np, nt)
}

/// Fraction of points whose predicted cluster maps to their class under the
/// best one-to-one cluster-to-class assignment.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let (m, np, nt) = confusion(pred, truth);
    let n = np.max(nt);
    let square: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i < np && j < nt { m[i][j] } else { 0.0 }).collect())
        .collect();
    let assignment = max_weight_assignment(&square);
    let hits: f64 = assignment.iter().enumerate().map(|(i, &j)| square[i][j]).sum();
    hits / pred.len() as f64
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// `I(pred; truth) / sqrt(H(pred) H(truth))`, zero when either partition
/// is a single block.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let (m, np, nt) = confusion(pred, truth);
    let n = pred.len() as f64;
    let row: Vec<f64> = m.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..nt).map(|j| m.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(row.iter().copied(), n);
    let ht = entropy(col.iter().copied(), n);
    if hp <= 0.0 || ht <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for i in 0..np {
        for j in 0..nt {
            let c = m[i][j];
            if c > 0.0 {
                mi += c / n * (c * n / (row[i] * col[j])).ln();
            }
        }
    }
    (mi / (hp * ht).sqrt()).clamp(0.0, 1.0)
}
