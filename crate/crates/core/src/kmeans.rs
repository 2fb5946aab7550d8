//! Lloyd's k-means with seeded k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each Lloyd iteration.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init<P: AsRef<[f64]>>(points: &[P], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();

    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can leave `target` just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // all remaining points coincide with a centroid
            chosen.iter().position(|c| !c).unwrap()
        };
        chosen[pick] = true;
        let c = points[pick].as_ref().to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn recompute_centroids<P: AsRef<[f64]>>(
    points: &[P],
    assignments: &[usize],
    m: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let inv = c as f64;
            s.iter_mut().for_each(|v| *v /= inv);
        }
    }
    (sums, counts)
}

fn objective<P: AsRef<[f64]>>(points: &[P], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a]))
        .sum()
}

/// Clusters `points` into `m` groups.
///
/// Empty clusters are repaired by moving the point farthest from its centroid
/// (taken from a cluster with at least two members) into the empty cluster.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], m: usize, config: KMeansConfig) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::KMeans("empty input".into()));
    }
    if m == 0 || m > points.len() {
        return Err(Error::KMeans(format!(
            "cannot form {m} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::KMeans("points differ in length".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_init(points, m, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..config.max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (best, best_d) = nearest(p.as_ref(), &centroids);
            let current = assignments[i];
            // only move on a strict improvement so ties never oscillate
            if current == usize::MAX
                || (best != current && best_d < sq_dist(p.as_ref(), &centroids[current]))
            {
                assignments[i] = best;
                changed = true;
            }
        }

        let (mut new_centroids, mut counts) = recompute_centroids(points, &assignments, m, dim);
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| (i, sq_dist(points[i].as_ref(), &new_centroids[assignments[i]])))
                .fold(None::<(usize, f64)>, |acc, (i, d)| match acc {
                    Some((_, best)) if best >= d => acc,
                    _ => Some((i, d)),
                })
                .map(|(i, _)| i)
                .expect("m <= n guarantees a cluster with two members");
            assignments[far] = empty;
            changed = true;
            let recomputed = recompute_centroids(points, &assignments, m, dim);
            new_centroids = recomputed.0;
            counts = recomputed.1;
        }
        centroids = new_centroids;

        let obj = objective(points, &assignments, &centroids);
        let prev = history.last().copied();
        history.push(obj);
        if !changed {
            break;
        }
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - obj) < config.tol * prev {
                break;
            }
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_obvious_groups() {
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        for seed in 0..20 {
            let r = kmeans(&points, 2, KMeansConfig { seed, ..Default::default() }).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[2], r.assignments[3]);
            assert_ne!(r.assignments[0], r.assignments[2]);
            // (0.05^2)*2 + (0.05^2)*2
            assert!((r.objective() - 0.01).abs() < 1e-12, "{}", r.objective());
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let points: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&points, 6, KMeansConfig::default()).unwrap();
        assert_eq!(r.objective(), 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let points = vec![vec![1.0, 1.0]; 10];
        let r = kmeans(&points, 3, KMeansConfig::default()).unwrap();
        for c in 0..3 {
            assert!(r.assignments.contains(&c));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(kmeans(&empty, 1, KMeansConfig::default()).is_err());
        assert!(kmeans(&[vec![1.0]], 2, KMeansConfig::default()).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, KMeansConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn history_non_increasing(
            points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8..80),
            m in 1usize..8,
            seed in any::<u64>(),
        ) {
            let r = kmeans(&points, m, KMeansConfig { seed, ..Default::default() }).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(!r.history.is_empty());
        }
    }
}
