//! Compressed approximate-nearest-neighbor index over chunk embeddings.
//!
//! Layout: OPQ rotation → IVF coarse quantizer (k-means centroids, HNSW for
//! assignment and probing) → PQ codes of the residuals in per-centroid inverted
//! lists. Full vectors may additionally be kept for exact re-ranking.

mod hnsw;
mod io;
pub mod kmeans;
mod opq;
mod pq;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hnsw::Hnsw;
pub use opq::{rotated_pq_error, train_opq, OpqParams, OpqRotation};
pub use pq::{reconstruction_error, train_pq, PqCodebook};

/// Squared Euclidean distance, accumulated sequentially in `f32`.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub ncentroids: usize,
    /// Number of PQ subquantizers.
    #[serde(rename = "M")]
    pub m_sub: usize,
    pub bits_per_code: u32,
    pub nprobe_default: usize,
    pub hnsw_degree: usize,
    pub hnsw_ef_construction: usize,
    pub hnsw_ef_search: usize,
    /// 0 disables exact re-ranking.
    pub rerank_r: usize,
    /// Keep full vectors for re-ranking.
    pub store_vectors: bool,
    pub kmeans_iters: usize,
    pub opq_iters: usize,
    pub pq_iters: usize,
    /// Upper bound on vectors sampled for training.
    pub max_train: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            ncentroids: 256,
            m_sub: 8,
            bits_per_code: 8,
            nprobe_default: 16,
            hnsw_degree: 16,
            hnsw_ef_construction: 64,
            hnsw_ef_search: 32,
            rerank_r: 0,
            store_vectors: true,
            kmeans_iters: 20,
            opq_iters: 4,
            pq_iters: 15,
            max_train: 16_384,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.m_sub == 0 || !dim.is_multiple_of(self.m_sub) {
            return Err(Error::Config(format!("dimension {dim} is not divisible by M={}", self.m_sub)));
        }
        if !(1..=8).contains(&self.bits_per_code) {
            return Err(Error::Config(format!("bits_per_code must be in 1..=8, got {}", self.bits_per_code)));
        }
        if self.ncentroids == 0 || self.nprobe_default == 0 || self.nprobe_default > self.ncentroids {
            return Err(Error::Config(format!(
                "need 1 <= nprobe ({}) <= ncentroids ({})",
                self.nprobe_default, self.ncentroids
            )));
        }
        Ok(())
    }

    pub fn code_bits(&self) -> u32 {
        self.bits_per_code * self.m_sub as u32
    }
}

/// Coarse IVF centroids with the HNSW graph used to assign and probe them.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseQuantizer {
    pub(crate) dim: usize,
    pub(crate) centroids: Vec<f32>,
    pub(crate) hnsw: Hnsw,
}

impl CoarseQuantizer {
    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn graph(&self) -> &Hnsw {
        &self.hnsw
    }

    /// The `n` nearest centroids, ascending by `(distance, id)`. Exhaustive when
    /// `n` covers every centroid.
    pub fn nearest(&self, q: &[f32], n: usize, ef: usize) -> Vec<(f32, u32)> {
        if n >= self.len() {
            let mut all: Vec<(f32, u32)> = (0..self.len()).map(|i| (l2_sq(q, self.centroid(i)), i as u32)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            return all;
        }
        self.hnsw.search(&self.centroids, self.dim, q, n, ef.max(n))
    }

    pub fn exhaustive_nearest(&self, q: &[f32]) -> u32 {
        self.nearest(q, self.len(), 0)[0].1
    }
}

/// Lloyd's k-means (k-means++ seeding) over `vectors`, then an HNSW graph over the centroids.
pub fn train_coarse(vectors: &[f32], dim: usize, config: &IndexConfig) -> Result<CoarseQuantizer> {
    let km = kmeans::kmeans(vectors, dim, config.ncentroids, config.kmeans_iters, config.seed)?;
    let hnsw = Hnsw::build(
        &km.centroids,
        dim,
        config.hnsw_degree,
        config.hnsw_ef_construction,
        config.seed ^ 0x5EED,
    );
    Ok(CoarseQuantizer {
        dim,
        centroids: km.centroids,
        hnsw,
    })
}

/// Per-centroid lists of `(chunk_id, code)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvertedLists {
    pub(crate) code_len: usize,
    pub(crate) ids: Vec<Vec<u64>>,
    pub(crate) codes: Vec<Vec<u8>>,
}

impl InvertedLists {
    fn new(nlist: usize, code_len: usize) -> Self {
        Self {
            code_len,
            ids: vec![Vec::new(); nlist],
            codes: vec![Vec::new(); nlist],
        }
    }

    pub fn nlist(&self) -> usize {
        self.ids.len()
    }

    pub fn list_len(&self, list: usize) -> usize {
        self.ids[list].len()
    }

    pub fn list_ids(&self, list: usize) -> &[u64] {
        &self.ids[list]
    }

    pub fn total(&self) -> usize {
        self.ids.iter().map(Vec::len).sum()
    }
}

/// Query-time knobs. Unset options fall back to the index configuration.
#[derive(Clone, Copy, Default)]
pub struct QueryParams<'a> {
    pub k: usize,
    pub nprobe: Option<usize>,
    /// Candidate pool size before filtering; defaults to `k`.
    pub top_n: Option<usize>,
    pub rerank: Option<usize>,
    pub filter: Option<&'a (dyn Fn(u64) -> bool + Sync)>,
}

impl<'a> QueryParams<'a> {
    pub fn k(k: usize) -> Self {
        Self {
            k,
            ..Default::default()
        }
    }

    pub fn with_nprobe(mut self, nprobe: usize) -> Self {
        self.nprobe = Some(nprobe);
        self
    }

    pub fn with_top_n(mut self, top_n: usize) -> Self {
        self.top_n = Some(top_n);
        self
    }

    pub fn with_rerank(mut self, rerank: usize) -> Self {
        self.rerank = Some(rerank);
        self
    }

    pub fn with_filter(mut self, filter: &'a (dyn Fn(u64) -> bool + Sync)) -> Self {
        self.filter = Some(filter);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// `(chunk_id, distance)`, ascending by distance then id.
    pub hits: Vec<(u64, f32)>,
    /// Fewer than `k` candidates survived the filter.
    pub underfull: bool,
    pub lists_probed: usize,
    pub codes_scanned: usize,
}

/// Full vectors kept for exact re-ranking.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct StoredVectors {
    pub(crate) ids: Vec<u64>,
    pub(crate) data: Vec<f32>,
    pub(crate) row_of: std::collections::HashMap<u64, u32>,
}

#[derive(Debug)]
pub struct AnnIndex {
    pub(crate) config: IndexConfig,
    pub(crate) dim: usize,
    pub(crate) rotation: OpqRotation,
    pub(crate) coarse: CoarseQuantizer,
    pub(crate) pq: PqCodebook,
    pub(crate) lists: InvertedLists,
    pub(crate) stored: Option<StoredVectors>,
    pub(crate) ids: HashSet<u64>,
    probes: AtomicUsize,
}

impl Clone for AnnIndex {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            dim: self.dim,
            rotation: self.rotation.clone(),
            coarse: self.coarse.clone(),
            pq: self.pq.clone(),
            lists: self.lists.clone(),
            stored: self.stored.clone(),
            ids: self.ids.clone(),
            probes: AtomicUsize::new(self.probes.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for AnnIndex {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.dim == other.dim
            && self.rotation == other.rotation
            && self.coarse == other.coarse
            && self.pq == other.pq
            && self.lists == other.lists
            && self.stored == other.stored
    }
}

fn training_sample(vectors: &[f32], dim: usize, max: usize, seed: u64) -> Vec<f32> {
    let n = vectors.len() / dim;
    if n <= max {
        return vectors.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11);
    let mut rows = sample(&mut rng, n, max).into_vec();
    rows.sort_unstable();
    rows.iter().flat_map(|&r| vectors[r * dim..(r + 1) * dim].iter().copied()).collect()
}

impl AnnIndex {
    /// Trains rotation, coarse quantizer and residual PQ. The returned index is empty.
    pub fn train(vectors: &[f32], dim: usize, config: &IndexConfig) -> Result<Self> {
        config.validate(dim)?;
        if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", vectors.len())));
        }
        let n = vectors.len() / dim;
        if n < config.ncentroids {
            return Err(Error::Config(format!(
                "need at least ncentroids={} training vectors, got {n}",
                config.ncentroids
            )));
        }
        let train = training_sample(vectors, dim, config.max_train.max(config.ncentroids), config.seed);
        let opq_params = OpqParams {
            m_sub: config.m_sub,
            bits: config.bits_per_code,
            iters: config.opq_iters,
            pq_iters: config.pq_iters,
            seed: config.seed,
        };
        let rotation = if config.opq_iters > 0 {
            train_opq(&train, dim, &opq_params)?
        } else {
            OpqRotation::identity(dim)
        };
        let rotated = rotation.apply_all(&train);
        let coarse = train_coarse(&rotated, dim, config)?;
        let residuals: Vec<f32> = rotated
            .par_chunks(dim)
            .flat_map_iter(|v| {
                let c = coarse.centroid(coarse.exhaustive_nearest(v) as usize);
                v.iter().zip(c).map(|(a, b)| a - b).collect::<Vec<_>>()
            })
            .collect();
        let pq = train_pq(&residuals, dim, config.m_sub, config.bits_per_code, config.pq_iters, config.seed)?;
        Ok(Self {
            lists: InvertedLists::new(config.ncentroids, config.m_sub),
            stored: config.store_vectors.then(StoredVectors::default),
            config: config.clone(),
            dim,
            rotation,
            coarse,
            pq,
            ids: HashSet::new(),
            probes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lists.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rotation(&self) -> &OpqRotation {
        &self.rotation
    }

    pub fn coarse(&self) -> &CoarseQuantizer {
        &self.coarse
    }

    pub fn pq(&self) -> &PqCodebook {
        &self.pq
    }

    pub fn lists(&self) -> &InvertedLists {
        &self.lists
    }

    /// Total inverted lists visited by all searches so far.
    pub fn probe_count(&self) -> usize {
        self.probes.load(Ordering::Relaxed)
    }

    /// Coarse list a (raw, unrotated) vector is assigned to under the HNSW search.
    pub fn assign(&self, v: &[f32]) -> u32 {
        let r = self.rotation.apply(v);
        self.coarse.nearest(&r, 1, self.config.hnsw_ef_search)[0].1
    }

    /// Assigns each vector to a coarse list and appends its residual PQ code.
    pub fn add(&mut self, vectors: &[f32], chunk_ids: &[u64]) -> Result<()> {
        let d = self.dim;
        if vectors.len() != chunk_ids.len() * d {
            return Err(Error::Shape(format!(
                "add: {} values for {} ids of dimension {d}",
                vectors.len(),
                chunk_ids.len()
            )));
        }
        let mut batch = HashSet::with_capacity(chunk_ids.len());
        for &id in chunk_ids {
            if self.ids.contains(&id) || !batch.insert(id) {
                return Err(Error::Integrity(format!("duplicate chunk id {id}")));
            }
        }
        let ef = self.config.hnsw_ef_search;
        let encoded: Vec<(u32, Vec<u8>)> = vectors
            .par_chunks(d)
            .map(|v| {
                let r = self.rotation.apply(v);
                let list = self.coarse.nearest(&r, 1, ef)[0].1;
                let c = self.coarse.centroid(list as usize);
                let resid: Vec<f32> = r.iter().zip(c).map(|(a, b)| a - b).collect();
                (list, self.pq.encode(&resid))
            })
            .collect();
        for ((list, code), (&id, v)) in encoded.into_iter().zip(chunk_ids.iter().zip(vectors.chunks(d))) {
            self.lists.ids[list as usize].push(id);
            self.lists.codes[list as usize].extend_from_slice(&code);
            if let Some(st) = self.stored.as_mut() {
                st.row_of.insert(id, st.ids.len() as u32);
                st.ids.push(id);
                st.data.extend_from_slice(v);
            }
            self.ids.insert(id);
        }
        Ok(())
    }

    fn stored_vector(&self, id: u64) -> Option<&[f32]> {
        let st = self.stored.as_ref()?;
        let row = *st.row_of.get(&id)? as usize;
        Some(&st.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn search(&self, query: &[f32], params: &QueryParams<'_>) -> Result<SearchResult> {
        if self.is_empty() {
            return Err(Error::Argument("search on an empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, index {}", query.len(), self.dim)));
        }
        let k = params.k;
        let top_n = params.top_n.unwrap_or(k).max(k);
        let nprobe = params.nprobe.unwrap_or(self.config.nprobe_default).clamp(1, self.coarse.len());
        let rerank = params.rerank.unwrap_or(self.config.rerank_r);

        let q = self.rotation.apply(query);
        let probed = self.coarse.nearest(&q, nprobe, self.config.hnsw_ef_search);
        self.probes.fetch_add(probed.len(), Ordering::Relaxed);
        let code_len = self.lists.code_len;
        let mut cands: Vec<(f32, u64)> = Vec::new();
        let mut resid = vec![0.0f32; self.dim];
        for &(_, list) in &probed {
            let list = list as usize;
            let c = self.coarse.centroid(list);
            for ((r, a), b) in resid.iter_mut().zip(&q).zip(c) {
                *r = a - b;
            }
            let table = self.pq.adc_table(&resid);
            let codes = &self.lists.codes[list];
            cands.extend(
                self.lists.ids[list]
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (self.pq.adc_distance(&table, &codes[i * code_len..(i + 1) * code_len]), id)),
            );
        }
        let codes_scanned = cands.len();
        let by_dist = |a: &(f32, u64), b: &(f32, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let keep = if self.stored.is_some() { top_n.max(rerank) } else { top_n };
        if keep < cands.len() {
            cands.select_nth_unstable_by(keep, by_dist);
            cands.truncate(keep);
        }
        cands.sort_by(by_dist);

        if rerank > 0 && self.stored.is_some() {
            let r = rerank.min(cands.len());
            for c in &mut cands[..r] {
                if let Some(v) = self.stored_vector(c.1) {
                    c.0 = l2_sq(query, v);
                }
            }
            cands[..r].sort_by(by_dist);
        }

        cands.truncate(top_n);
        let mut hits: Vec<(u64, f32)> = cands
            .into_iter()
            .filter(|&(_, id)| params.filter.is_none_or(|f| f(id)))
            .map(|(d, id)| (id, d))
            .collect();
        let underfull = hits.len() < k;
        hits.truncate(k);
        Ok(SearchResult {
            hits,
            underfull,
            lists_probed: probed.len(),
            codes_scanned,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<String> {
        io::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        io::load(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        io::decode(bytes)
    }
}

/// Exact top-`k` by squared L2 over `embeddings` (`N × dim`, id = row), ties by lower id.
pub fn brute_force_search(embeddings: &[f32], dim: usize, query: &[f32], k: usize) -> Result<Vec<(u64, f32)>> {
    let n = embeddings.len() / dim;
    if k > n {
        return Err(Error::Argument(format!("k={k} exceeds the {n} stored vectors")));
    }
    let mut all: Vec<(f32, u64)> = embeddings
        .par_chunks(dim)
        .enumerate()
        .map(|(i, v)| (l2_sq(query, v), i as u64))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(all.into_iter().take(k).map(|(d, i)| (i, d)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_toy() -> (AnnIndex, Vec<f32>) {
        let data = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let config = IndexConfig {
            ncentroids: 1,
            m_sub: 2,
            nprobe_default: 1,
            opq_iters: 0,
            ..Default::default()
        };
        let mut idx = AnnIndex::train(&data, 2, &config).unwrap();
        idx.add(&data, &[0, 1, 2]).unwrap();
        (idx, data)
    }

    #[test]
    fn flat_toy_nearest() {
        let (idx, data) = flat_toy();
        let q = [0.9, 0.1];
        let got = idx.search(&q, &QueryParams::k(1)).unwrap();
        let oracle = brute_force_search(&data, 2, &q, 1).unwrap();
        assert_eq!(got.hits[0].0, 1);
        assert_eq!(oracle[0].0, 1);
        assert!(!got.underfull);
    }

    #[test]
    fn filter_skips_rejected_ids() {
        let (idx, _) = flat_toy();
        let reject_one = |id: u64| id != 1;
        let p = QueryParams::k(1).with_top_n(3).with_filter(&reject_one);
        let got = idx.search(&[0.9, 0.1], &p).unwrap();
        assert_eq!(got.hits[0].0, 0);

        let p = QueryParams::k(3).with_top_n(3).with_filter(&reject_one);
        let got = idx.search(&[0.9, 0.1], &p).unwrap();
        assert_eq!(got.hits.len(), 2);
        assert!(got.underfull);
    }

    #[test]
    fn brute_force_cases() {
        let data = vec![0.0, 0.0, 2.0, 0.0, 1.0, 0.0];
        let got = brute_force_search(&data, 2, &[0.0, 0.0], 3).unwrap();
        assert_eq!(got.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2, 1]);
        assert_eq!(got[0].1, 0.0);
        // (1,0) and (-1,0) are equidistant from the origin.
        let tie = vec![1.0, 0.0, -1.0, 0.0];
        let got = brute_force_search(&tie, 2, &[0.0, 0.0], 2).unwrap();
        assert_eq!((got[0].0, got[1].0), (0, 1));
        assert!(matches!(brute_force_search(&tie, 2, &[0.0, 0.0], 3), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let (mut idx, _) = flat_toy();
        let before = idx.lists().clone();
        assert!(matches!(idx.add(&[0.5, 0.5], &[2]), Err(Error::Integrity(_))));
        assert!(matches!(idx.add(&[0.5, 0.5, 0.1, 0.1], &[7, 7]), Err(Error::Integrity(_))));
        assert_eq!(idx.lists(), &before);
    }

    #[test]
    fn config_validation() {
        let c = IndexConfig::default();
        assert!(c.validate(64).is_ok());
        assert_eq!(c.code_bits(), 64);
        assert!(c.validate(60).is_err());
        let c = IndexConfig {
            nprobe_default: 300,
            ..Default::default()
        };
        assert!(c.validate(64).is_err());
    }

    #[test]
    fn empty_index_search_errors() {
        let data = vec![0.0, 0.0, 1.0, 1.0];
        let config = IndexConfig {
            ncentroids: 1,
            m_sub: 2,
            nprobe_default: 1,
            opq_iters: 0,
            ..Default::default()
        };
        let idx = AnnIndex::train(&data, 2, &config).unwrap();
        assert!(matches!(idx.search(&[0.0, 0.0], &QueryParams::k(1)), Err(Error::Argument(_))));
    }
}
