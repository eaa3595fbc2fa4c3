//! Optimized product quantization: a learned orthogonal rotation applied before PQ.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::pq::{reconstruction_error, train_pq, PqCodebook};

/// Orthogonal `d × d` rotation, applied to row vectors as `x · R`.
#[derive(Clone, Debug, PartialEq)]
pub struct OpqRotation {
    pub(crate) dim: usize,
    pub(crate) matrix: Vec<f64>,
}

impl OpqRotation {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self { dim, matrix }
    }

    pub fn from_matrix(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Shape(format!("rotation needs {} entries, got {}", dim * dim, matrix.len())));
        }
        Ok(Self { dim, matrix })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let mut out = vec![0.0f64; d];
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            for (o, &r) in out.iter_mut().zip(&self.matrix[i * d..(i + 1) * d]) {
                *o += xi * r;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    pub fn apply_all(&self, vectors: &[f32]) -> Vec<f32> {
        vectors.par_chunks(self.dim).flat_map_iter(|v| self.apply(v)).collect()
    }

    /// `max |RᵀR − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| self.matrix[k * d + i] * self.matrix[k * d + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - want).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpqParams {
    pub m_sub: usize,
    pub bits: u32,
    pub iters: usize,
    pub pq_iters: usize,
    pub seed: u64,
}

/// PQ reconstruction error after rotating by `rotation`, with a PQ trained under a fixed seed.
pub fn rotated_pq_error(vectors: &[f32], rotation: &OpqRotation, params: &OpqParams) -> Result<(f64, PqCodebook)> {
    let rotated = rotation.apply_all(vectors);
    let pq = train_pq(&rotated, rotation.dim, params.m_sub, params.bits, params.pq_iters, params.seed)?;
    Ok((reconstruction_error(&pq, &rotated), pq))
}

fn to_matrix(v: &[f32], n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(n, d, v.iter().map(|&x| x as f64))
}

/// Alternates PQ training with an orthogonal Procrustes update of the rotation.
///
/// Returns the rotation with the lowest PQ reconstruction error seen, the identity
/// included, so the result is never worse than no rotation.
pub fn train_opq(vectors: &[f32], dim: usize, params: &OpqParams) -> Result<OpqRotation> {
    if params.m_sub == 0 || !dim.is_multiple_of(params.m_sub) {
        return Err(Error::Config(format!("dimension {dim} is not divisible by M={}", params.m_sub)));
    }
    let n = vectors.len() / dim;
    let identity = OpqRotation::identity(dim);
    if n == 0 || vectors.chunks(dim).all(|v| v == &vectors[..dim]) {
        return Ok(identity);
    }
    let x = to_matrix(vectors, n, dim);
    let (mut best_err, mut pq) = rotated_pq_error(vectors, &identity, params)?;
    let mut best = identity.clone();
    let mut current = identity;
    for _ in 0..params.iters {
        let rotated = current.apply_all(vectors);
        let recon: Vec<f32> = rotated.par_chunks(dim).flat_map_iter(|v| pq.decode(&pq.encode(v))).collect();
        let y = to_matrix(&recon, n, dim);
        let svd = (x.transpose() * y).svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            break;
        };
        let r = u * vt;
        let matrix: Vec<f64> = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
        current = OpqRotation::from_matrix(dim, matrix)?;
        let (err, next_pq) = rotated_pq_error(vectors, &current, params)?;
        pq = next_pq;
        if err < best_err {
            best_err = err;
            best = current.clone();
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn params(seed: u64) -> OpqParams {
        OpqParams {
            m_sub: 2,
            bits: 4,
            iters: 8,
            pq_iters: 15,
            seed,
        }
    }

    #[test]
    fn output_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f32> = (0..500 * 8).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let r = train_opq(&v, 8, &params(1)).unwrap();
        assert!(r.orthogonality_error() < 1e-6);
    }

    #[test]
    fn degenerate_input_gives_identity() {
        let v = vec![0.5f32; 40 * 4];
        assert_eq!(train_opq(&v, 4, &params(0)).unwrap(), OpqRotation::identity(4));
    }

    #[test]
    fn never_worse_than_identity_on_axis_aligned_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Independent scales per subspace; already suited to PQ.
        let v: Vec<f32> = (0..400)
            .flat_map(|_| {
                (0..8)
                    .map(|j| rng.sample::<f32, _>(StandardNormal) * if j < 4 { 3.0 } else { 0.5 })
                    .collect::<Vec<_>>()
            })
            .collect();
        let p = params(3);
        let r = train_opq(&v, 8, &p).unwrap();
        let learned = rotated_pq_error(&v, &r, &p).unwrap().0;
        let ident = rotated_pq_error(&v, &OpqRotation::identity(8), &p).unwrap().0;
        assert!(learned <= ident + 1e-9);
    }

    #[test]
    fn helps_on_correlated_gaussians() {
        let mut wins = 0;
        let mut mean_gain = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            // Latent factors spread across both subspaces by a random mixing matrix.
            let mix: Vec<f32> = (0..8 * 8).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let scales = [4.0f32, 3.0, 0.3, 0.2, 0.1, 0.1, 0.05, 0.05];
            let v: Vec<f32> = (0..600)
                .flat_map(|_| {
                    let z: Vec<f32> = scales.iter().map(|s| s * rng.sample::<f32, _>(StandardNormal)).collect();
                    (0..8)
                        .map(|j| (0..8).map(|i| z[i] * mix[i * 8 + j]).sum::<f32>())
                        .collect::<Vec<_>>()
                })
                .collect();
            let p = params(seed);
            let r = train_opq(&v, 8, &p).unwrap();
            let learned = rotated_pq_error(&v, &r, &p).unwrap().0;
            let ident = rotated_pq_error(&v, &OpqRotation::identity(8), &p).unwrap().0;
            wins += usize::from(learned < ident);
            mean_gain += (ident - learned) / ident / 10.0;
        }
        assert_eq!(wins, 10, "OPQ improved on {wins}/10 seeds");
        assert!(mean_gain > 0.0);
    }
}
