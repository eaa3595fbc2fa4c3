//! Lloyd's k-means with k-means++ seeding. Centroids are kept in `f64` while
//! iterating so the quantization objective is monotone up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances to the assigned centroid, one entry per assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// k-means++ seeding: first center uniform, the rest sampled ∝ D².
pub fn kmeans_plus_plus(data: &[f32], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend(data[first * dim..(first + 1) * dim].iter().map(|&v| v as f64));
    let mut best: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist64(&data[i * dim..(i + 1) * dim], &centers[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            first
        };
        centers.extend(data[pick * dim..(pick + 1) * dim].iter().map(|&v| v as f64));
        let new_center = &centers[c * dim..(c + 1) * dim];
        best.par_iter_mut().enumerate().for_each(|(i, b)| {
            let d = sq_dist64(&data[i * dim..(i + 1) * dim], new_center);
            if d < *b {
                *b = d;
            }
        });
    }
    centers
}

fn assign(data: &[f32], dim: usize, centers: &[f64]) -> (Vec<u32>, Vec<f64>) {
    data.par_chunks(dim)
        .map(|x| {
            let mut best = (f64::INFINITY, 0u32);
            for (j, c) in centers.chunks(dim).enumerate() {
                let d = sq_dist64(x, c);
                if d < best.0 {
                    best = (d, j as u32);
                }
            }
            (best.1, best.0)
        })
        .unzip()
}

/// Runs Lloyd iterations from the given initial centers (`k × dim`, f64).
pub fn lloyd(data: &[f32], dim: usize, init: Vec<f64>, iters: usize) -> KMeansResult {
    let n = data.len() / dim;
    let k = init.len() / dim;
    let mut centers = init;
    let mut objective = Vec::with_capacity(iters + 1);
    let (mut assignments, mut dists) = assign(data, dim, &centers);
    objective.push(dists.iter().sum());
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, &x) in sums[a as usize * dim..(a as usize + 1) * dim]
                .iter_mut()
                .zip(&data[i * dim..(i + 1) * dim])
            {
                *s += x as f64;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, s) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *dst = s / c;
                }
            } else {
                // Empty cluster: move it onto the point farthest from its current centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    taken[i] = true;
                    for (dst, &x) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                        *dst = x as f64;
                    }
                    dists[i] = 0.0;
                }
            }
        }
        let prev = assignments;
        (assignments, dists) = assign(data, dim, &centers);
        objective.push(dists.iter().sum());
        if assignments == prev && counts.iter().all(|&c| c > 0) {
            break;
        }
    }
    KMeansResult {
        centroids: centers.iter().map(|&v| v as f32).collect(),
        assignments,
        objective,
    }
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("kmeans: {} values do not form rows of {dim}", data.len())));
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans: need at least {k} vectors, got {n}")));
    }
    let init = kmeans_plus_plus(data, dim, k, seed);
    Ok(lloyd(data, dim, init, iters))
}
