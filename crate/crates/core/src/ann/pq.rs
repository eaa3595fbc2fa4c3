//! Product quantizer: `M` independent sub-codebooks of `2^bits` centroids each.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::kmeans::kmeans;
use super::l2_sq;

#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    pub(crate) m_sub: usize,
    pub(crate) bits: u32,
    pub(crate) dsub: usize,
    /// `m_sub × 2^bits × dsub`.
    pub(crate) centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn m_sub(&self) -> usize {
        self.m_sub
    }

    pub fn ksub(&self) -> usize {
        1 << self.bits
    }

    pub fn dsub(&self) -> usize {
        self.dsub
    }

    pub fn dim(&self) -> usize {
        self.m_sub * self.dsub
    }

    pub fn sub_codebook(&self, s: usize) -> &[f32] {
        let w = self.ksub() * self.dsub;
        &self.centroids[s * w..(s + 1) * w]
    }

    fn centroid(&self, s: usize, c: usize) -> &[f32] {
        &self.sub_codebook(s)[c * self.dsub..(c + 1) * self.dsub]
    }

    /// Nearest sub-centroid per subspace; ties go to the lower index.
    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        let mut code = Vec::with_capacity(self.m_sub);
        self.encode_into(v, &mut code);
        code
    }

    pub fn encode_into(&self, v: &[f32], out: &mut Vec<u8>) {
        for s in 0..self.m_sub {
            let x = &v[s * self.dsub..(s + 1) * self.dsub];
            let mut best = (f32::INFINITY, 0usize);
            for (c, cent) in self.sub_codebook(s).chunks(self.dsub).enumerate() {
                let d = l2_sq(x, cent);
                if d < best.0 {
                    best = (d, c);
                }
            }
            out.push(best.1 as u8);
        }
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &c)| self.centroid(s, c as usize).iter().copied())
            .collect()
    }

    /// Asymmetric distance lookup table, `m_sub × 2^bits`: squared distance from each
    /// query sub-vector to every sub-centroid.
    pub fn adc_table(&self, q: &[f32]) -> Vec<f32> {
        let ks = self.ksub();
        let mut table = Vec::with_capacity(self.m_sub * ks);
        for s in 0..self.m_sub {
            let x = &q[s * self.dsub..(s + 1) * self.dsub];
            table.extend(self.sub_codebook(s).chunks(self.dsub).map(|c| l2_sq(x, c)));
        }
        table
    }

    #[inline]
    pub fn adc_distance(&self, table: &[f32], code: &[u8]) -> f32 {
        let ks = self.ksub();
        code.iter().enumerate().map(|(s, &c)| table[s * ks + c as usize]).sum()
    }
}

/// Trains one k-means codebook per subspace on `vectors` (`n × dim`).
///
/// With fewer vectors than `2^bits` the cluster count shrinks to `n`; the remaining
/// rows duplicate centroid 0 and are never selected by the encoder.
pub fn train_pq(vectors: &[f32], dim: usize, m_sub: usize, bits: u32, iters: usize, seed: u64) -> Result<PqCodebook> {
    if m_sub == 0 || !dim.is_multiple_of(m_sub) {
        return Err(Error::Config(format!("dimension {dim} is not divisible by M={m_sub}")));
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::Config(format!("bits per code must be in 1..=8, got {bits}")));
    }
    let n = vectors.len() / dim;
    if n == 0 {
        return Err(Error::Config("train_pq: no training vectors".into()));
    }
    let dsub = dim / m_sub;
    let ks = 1usize << bits;
    let k = ks.min(n);
    if k < ks {
        log::warn!("train_pq: {n} training vectors for {ks} clusters; using {k}");
    }
    let books: Vec<Result<Vec<f32>>> = (0..m_sub)
        .into_par_iter()
        .map(|s| {
            let sub: Vec<f32> = vectors
                .chunks(dim)
                .flat_map(|v| v[s * dsub..(s + 1) * dsub].iter().copied())
                .collect();
            let mut cents = kmeans(&sub, dsub, k, iters, seed.wrapping_add(s as u64))?.centroids;
            let first = cents[..dsub].to_vec();
            while cents.len() < ks * dsub {
                cents.extend_from_slice(&first);
            }
            Ok(cents)
        })
        .collect();
    let mut centroids = Vec::with_capacity(m_sub * ks * dsub);
    for b in books {
        centroids.extend(b?);
    }
    Ok(PqCodebook {
        m_sub,
        bits,
        dsub,
        centroids,
    })
}

/// Mean squared reconstruction error of `vectors` under `pq`.
pub fn reconstruction_error(pq: &PqCodebook, vectors: &[f32]) -> f64 {
    let dim = pq.dim();
    let n = vectors.len() / dim;
    let total: f64 = vectors
        .par_chunks(dim)
        .map(|v| l2_sq(v, &pq.decode(&pq.encode(v))) as f64)
        .sum();
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes() {
        let data: Vec<f32> = (0..400).map(|i| (i % 13) as f32).collect();
        let pq = train_pq(&data, 4, 2, 3, 5, 0).unwrap();
        assert_eq!((pq.m_sub(), pq.dsub(), pq.ksub()), (2, 2, 8));
        assert_eq!(pq.sub_codebook(1).len(), 16);
    }

    #[test]
    fn bad_config() {
        assert!(matches!(train_pq(&[0.0; 12], 3, 2, 8, 1, 0), Err(Error::Config(_))));
        assert!(matches!(train_pq(&[0.0; 12], 4, 2, 9, 1, 0), Err(Error::Config(_))));
    }

    /// Small grid of exactly representable values so f32 arithmetic is exact.
    fn memorizable(seed: u64, distinct: usize, total: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f32> = (0..distinct * 8).map(|_| rng.gen_range(-8i32..8) as f32 * 0.25).collect();
        (0..total).flat_map(|i| base[(i % distinct) * 8..(i % distinct + 1) * 8].to_vec()).collect()
    }

    #[test]
    fn memorizes_few_distinct_vectors() {
        let data = memorizable(1, 16, 64);
        let pq = train_pq(&data, 8, 4, 4, 10, 3).unwrap();
        for v in data.chunks(8) {
            assert_eq!(pq.decode(&pq.encode(v)), v.to_vec());
        }
        // Fewer vectors than clusters: codebook shrinks but still memorizes.
        let small = memorizable(2, 5, 5);
        let pq = train_pq(&small, 8, 2, 8, 10, 3).unwrap();
        assert_eq!(pq.sub_codebook(0).len(), 256 * 4);
        for v in small.chunks(8) {
            assert_eq!(pq.decode(&pq.encode(v)), v.to_vec());
        }
    }

    #[test]
    fn adc_equals_exact_distance_on_memorized_set() {
        let data = memorizable(4, 16, 16);
        let pq = train_pq(&data, 8, 4, 4, 10, 3).unwrap();
        let queries = memorizable(5, 10, 10);
        for q in queries.chunks(8) {
            let table = pq.adc_table(q);
            for v in data.chunks(8) {
                let adc = pq.adc_distance(&table, &pq.encode(v)) as f64;
                let exact: f64 = q.iter().zip(v).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                assert!((adc - exact).abs() < 1e-9, "{adc} vs {exact}");
            }
        }
    }
}
