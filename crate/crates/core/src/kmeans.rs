//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once an iteration lowers inertia by less than `tol` times the
    /// previous inertia.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 6,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point duplicates a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Clusters `points` into `cfg.k` groups. Deterministic for a given `rng`
/// state.
///
/// Inertia is non-increasing: a point only changes cluster when another
/// centroid is strictly closer, a centroid only moves to its members' mean
/// when that lowers the cluster's cost, and an iteration whose inertia comes
/// out higher through rounding is discarded and ends the run. Empty clusters
/// keep their centroid.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut R) -> Result<KMeansResult> {
    let n = points.len();
    if cfg.k == 0 {
        return Err(PmxError::Validation("k-means needs k >= 1".into()));
    }
    if n < cfg.k {
        return Err(PmxError::Validation(format!(
            "k-means with k = {} needs at least {} points, got {n}",
            cfg.k, cfg.k
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PmxError::shape("k-means point", dim, p.len()));
    }

    let mut centroids = seed_plus_plus(points, cfg.k, rng);
    let mut assignments = Vec::with_capacity(n);
    let mut inertia = 0.0;
    for p in points {
        let (c, d) = nearest(p, &centroids);
        assignments.push(c);
        inertia += d;
    }
    let mut history = vec![inertia];

    for _ in 0..cfg.max_iter {
        let previous = (centroids.clone(), assignments.clone());
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for m in &members {
                mean.iter_mut().zip(m.iter()).for_each(|(s, v)| *s += v);
            }
            let count = members.len() as f64;
            mean.iter_mut().for_each(|s| *s /= count);
            let old_cost: f64 = members.iter().map(|m| sq_dist(m, centroid)).sum();
            let new_cost: f64 = members.iter().map(|m| sq_dist(m, &mean)).sum();
            if new_cost < old_cost {
                *centroid = mean;
            }
        }

        let mut next = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let current = sq_dist(p, &centroids[*a]);
            let (c, d) = nearest(p, &centroids);
            if d < current {
                *a = c;
                next += d;
            } else {
                next += current;
            }
        }
        if next > inertia {
            (centroids, assignments) = previous;
            break;
        }
        history.push(next);
        let prev = inertia;
        inertia = next;
        if prev - next <= cfg.tol * prev {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn k_equal_n_puts_every_point_in_its_own_cluster() {
        let mut rng = stream(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let points: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let cfg = KMeansConfig { k: 6, ..Default::default() };
        let r = kmeans(&points, &cfg, &mut stream(11)).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn duplicates_with_k_equal_n_still_reach_zero_inertia() {
        let points = vec![vec![1.0, 1.0]; 4];
        let cfg = KMeansConfig { k: 4, ..Default::default() };
        assert_eq!(kmeans(&points, &cfg, &mut stream(0)).unwrap().inertia(), 0.0);
    }

    #[test]
    fn recovers_means_of_separated_blobs() {
        let mut rng = stream(21);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let centres = [[-20.0, 5.0, 0.0], [20.0, -5.0, 3.0]];
        let mut points = Vec::new();
        let mut sums = [[0.0; 3]; 2];
        for i in 0..200 {
            let b = i % 2;
            let p: Vec<f64> = centres[b].iter().map(|c| c + normal.sample(&mut rng)).collect();
            sums[b].iter_mut().zip(&p).for_each(|(s, v)| *s += v);
            points.push(p);
        }
        let means: Vec<Vec<f64>> = sums.iter().map(|s| s.iter().map(|v| v / 100.0).collect()).collect();
        let cfg = KMeansConfig { k: 2, ..Default::default() };
        let r = kmeans(&points, &cfg, &mut stream(5)).unwrap();
        for mean in &means {
            let best = r
                .centroids
                .iter()
                .map(|c| c.iter().zip(mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "centroid off by {best}");
        }
    }

    #[test]
    fn rejects_too_few_points() {
        let points = vec![vec![0.0]; 3];
        let cfg = KMeansConfig { k: 6, ..Default::default() };
        assert!(kmeans(&points, &cfg, &mut stream(0)).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let mut rng = stream(8);
        let points: Vec<Vec<f64>> = (0..50).map(|_| vec![rand::Rng::random(&mut rng), rand::Rng::random(&mut rng)]).collect();
        let cfg = KMeansConfig { k: 4, ..Default::default() };
        let a = kmeans(&points, &cfg, &mut stream(1)).unwrap();
        let b = kmeans(&points, &cfg, &mut stream(1)).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia_history, b.inertia_history);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(
            seed in any::<u64>(),
            n in 6usize..60,
            k in 1usize..6,
            dim in 1usize..6,
        ) {
            let mut rng = stream(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let points: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..dim).map(|_| normal.sample(&mut rng) + (i % 3) as f64).collect())
                .collect();
            let cfg = KMeansConfig { k, ..Default::default() };
            let r = kmeans(&points, &cfg, &mut rng).unwrap();
            for w in r.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
            }
            prop_assert!(r.inertia_history.len() <= cfg.max_iter + 1);
        }
    }
}
