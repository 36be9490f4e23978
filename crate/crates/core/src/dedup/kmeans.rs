//! Seeded k-means++ initialization followed by Lloyd iterations.
//!
//! The assignment step runs in parallel over points; centroid accumulation
//! and the objective are reduced sequentially in point order, so the result
//! is bit-identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Arithmetic means of the members; not re-normalized.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    /// Sum of squared distances of points to their assigned centroid.
    pub objective: f64,
    /// Objective after each iteration; non-increasing.
    pub objective_history: Vec<f64>,
    pub seed: u64,
    pub iterations_run: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; exact ties go to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .par_iter()
        .map(|p| nearest_centroid(p, centroids).0)
        .collect()
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the final sum; take the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // All remaining points coincide with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, &points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the farthest point of a multi-member cluster into each empty cluster.
/// A point already sitting on its centroid is never moved: that gains nothing
/// and lets coincident points trade places forever.
fn reseed_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &c in assign.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let c = assign[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[c]);
            if d > 0.0 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            sizes[assign[i]] -= 1;
            assign[i] = empty;
            sizes[empty] = 1;
        }
    }
}

fn update_centroids(points: &[Vec<f64>], assign: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let k = previous.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((mut s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.iter_mut().for_each(|x| *x /= n as f64);
                s
            }
        })
        .collect()
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "k-means over an empty point set".into(),
        ));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be positive".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput(
            "points must share a positive dimension".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign = assign_all(points, &centroids);
    reseed_empty(points, &centroids, &mut assign);
    let mut history: Vec<f64> = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut converged = false;
    let mut iterations_run = 0;
    for it in 0..=max_iter {
        let updated = update_centroids(points, &assign, &centroids);
        let obj = objective(points, &updated, &assign);
        // In exact arithmetic a changed assignment strictly lowers the
        // objective. When it does not, the change was rounding noise between
        // near-coincident centroids; keep the previous state and stop.
        if let (Some(&last), Some(prev)) = (history.last(), previous.as_ref()) {
            if obj >= last {
                assign = prev.clone();
                converged = true;
                break;
            }
        }
        centroids = updated;
        history.push(obj);
        if it == max_iter {
            // Out of iterations; centroids match the last assignment.
            break;
        }
        iterations_run = it + 1;
        // Reseed before comparing: with coincident points the plain nearest
        // pass would empty the same cluster every round and never settle.
        let mut next = assign_all(points, &centroids);
        reseed_empty(points, &centroids, &mut next);
        if next == assign {
            converged = true;
            break;
        }
        previous = Some(std::mem::replace(&mut assign, next));
    }
    let obj = objective(points, &centroids, &assign);
    Ok(ClusterModel {
        k,
        centroids,
        assignments: assign,
        objective: obj,
        objective_history: history,
        seed,
        iterations_run,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: [f64; 2]) -> Vec<f64> {
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        vec![v[0] / n, v[1] / n]
    }

    #[test]
    fn coincident_points_settle() {
        let pts = vec![vec![1.0]; 6];
        let m = kmeans(&pts, 3, 4, 50).unwrap();
        assert!(m.converged);
        assert_eq!(m.objective, 0.0);
        assert_eq!(m.objective_history, [0.0]);
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = vec![vec![0.6, 0.8]; 5];
        let m = kmeans(&pts, 1, 9, 10).unwrap();
        assert_eq!(m.centroids[0], vec![0.6, 0.8]);
        assert_eq!(m.objective, 0.0);
        assert!(m.converged);
    }

    #[test]
    fn two_groups_match_exhaustive_partition() {
        let pts = vec![
            unit([1.0, 0.0]),
            unit([0.999, 0.045]),
            unit([0.0, 1.0]),
            unit([0.045, 0.999]),
        ];
        // Oracle: enumerate all 2-partitions into nonempty groups, minimize SSE.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << pts.len()) - 1 {
            let mut sse = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f64>> = (0..pts.len())
                    .filter(|i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| &pts[i])
                    .collect();
                let mean: Vec<f64> = (0..2)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                sse += members
                    .iter()
                    .map(|p| squared_distance(p, &mean))
                    .sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, mask);
            }
        }
        for seed in 0..20 {
            let m = kmeans(&pts, 2, seed, 50).unwrap();
            assert_eq!(m.assignments[0], m.assignments[1]);
            assert_eq!(m.assignments[2], m.assignments[3]);
            assert_ne!(m.assignments[0], m.assignments[2]);
            assert!((m.objective - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![1.0, 0.0]];
        assert!(kmeans(&pts, 2, 0, 5).is_err());
        assert!(kmeans(&[], 1, 0, 5).is_err());
    }

    #[test]
    fn duplicates_with_k_above_distinct_count() {
        let pts = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let m = kmeans(&pts, 3, 4, 20).unwrap();
        assert!(m.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(m.objective, 0.0);
    }
}
