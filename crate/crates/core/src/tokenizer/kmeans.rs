//! Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic given the RNG: ties in nearest-centroid assignment break to
//! the lowest centroid index, and empty clusters are reseeded to the point
//! farthest from its assigned centroid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct KMeansFit {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    /// Nearest-centroid index per point under the final centroids.
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step, in order.
    pub objective_trace: Vec<f64>,
}

pub fn kmeans(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<KMeansFit> {
    if n == 0 {
        return Err(Error::config("k-means: empty input"));
    }
    if n < k {
        return Err(Error::config(format!(
            "k-means: {n} points cannot fill {k} clusters"
        )));
    }
    debug_assert_eq!(points.len(), n * dim);

    let mut centroids = plus_plus_init(points, n, dim, k, rng);
    let mut assignments = vec![0usize; n];
    let mut objective_trace = Vec::new();

    let mut prev_obj = assign(points, n, dim, &centroids, k, &mut assignments);
    objective_trace.push(prev_obj);

    for _ in 0..max_iters.max(1) {
        update_centroids(points, n, dim, k, &assignments, &mut centroids);
        reseed_empty_clusters(points, n, dim, k, &mut assignments, &mut centroids);
        let obj = assign(points, n, dim, &centroids, k, &mut assignments);
        objective_trace.push(obj);
        let rel = if prev_obj > 0.0 {
            (prev_obj - obj) / prev_obj
        } else {
            0.0
        };
        prev_obj = obj;
        if rel < tol {
            break;
        }
    }

    Ok(KMeansFit {
        centroids,
        assignments,
        objective_trace,
    })
}

fn plus_plus_init(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut dist_sq = vec![0.0f64; n];
    for i in 0..n {
        dist_sq[i] = sq_dist(&points[i * dim..(i + 1) * dim], &centroids[0..dim]);
    }

    while centroids.len() < k * dim {
        let total: f64 = dist_sq.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All remaining mass is on already-chosen duplicates; fall back to
            // the lowest-index point for determinism.
            dist_sq.iter().position(|&d| d >= 0.0).unwrap_or(0)
        };
        let c_start = centroids.len();
        centroids.extend_from_slice(&points[chosen * dim..(chosen + 1) * dim]);
        let new_c = &centroids[c_start..c_start + dim];
        for i in 0..n {
            let d = sq_dist(&points[i * dim..(i + 1) * dim], new_c);
            if d < dist_sq[i] {
                dist_sq[i] = d;
            }
        }
    }
    centroids
}

fn assign(
    points: &[f64],
    n: usize,
    dim: usize,
    centroids: &[f64],
    k: usize,
    assignments: &mut [usize],
) -> f64 {
    let mut objective = 0.0;
    for i in 0..n {
        let p = &points[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        objective += best_d;
    }
    objective
}

fn update_centroids(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    assignments: &[usize],
    centroids: &mut [f64],
) {
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0f64; k * dim];
    for i in 0..n {
        let c = assignments[i];
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&points[i * dim..(i + 1) * dim])
        {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
        // Empty clusters keep their position until reseeding.
    }
}

fn reseed_empty_clusters(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    assignments: &mut [usize],
    centroids: &mut [f64],
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // Farthest point from its currently assigned centroid; steal it.
        let mut far_idx = 0usize;
        let mut far_d = -1.0f64;
        for i in 0..n {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue; // don't empty a singleton cluster
            }
            let d = sq_dist(
                &points[i * dim..(i + 1) * dim],
                &centroids[a * dim..(a + 1) * dim],
            );
            if d > far_d {
                far_d = d;
                far_idx = i;
            }
        }
        let old = assignments[far_idx];
        counts[old] -= 1;
        counts[c] += 1;
        assignments[far_idx] = c;
        centroids[c * dim..(c + 1) * dim]
            .copy_from_slice(&points[far_idx * dim..(far_idx + 1) * dim]);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn distinct_points_equal_clusters_gives_zero_error() {
        let points = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fit = kmeans(&points, 4, 2, 4, 50, 1e-9, &mut rng).unwrap();
        assert!(fit.objective_trace.last().unwrap() < &1e-24);
    }

    #[test]
    fn two_separated_pairs_find_cluster_means() {
        // Pairs around (0,0) and (10,10); fixed point is the two means.
        let points = vec![-1.0, 0.0, 1.0, 0.0, 9.0, 10.0, 11.0, 10.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fit = kmeans(&points, 4, 2, 2, 50, 1e-12, &mut rng).unwrap();
        let mut cents: Vec<(f64, f64)> = (0..2)
            .map(|c| (fit.centroids[c * 2], fit.centroids[c * 2 + 1]))
            .collect();
        cents.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((cents[0].0 - 0.0).abs() < 1e-12 && (cents[0].1 - 0.0).abs() < 1e-12);
        assert!((cents[1].0 - 10.0).abs() < 1e-12 && (cents[1].1 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn objective_is_monotone_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let dim = 3;
        let points: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>() * 10.0).collect();
        let fit = kmeans(&points, n, dim, 8, 100, 0.0, &mut rng).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                "objective rose: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn more_points_than_needed_with_duplicates_still_fits() {
        let points = vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fit = kmeans(&points, 4, 2, 2, 20, 1e-9, &mut rng).unwrap();
        assert_eq!(fit.assignments.len(), 4);
    }
}
