use crate::ann::{brute_force_search, AnnIndex, QueryParams};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::model::Neighbor;
use crate::tokenizer::TokenId;

/// Anything that maps a query chunk to up to `k` neighbors.
pub trait NeighborSource: Sync {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>>;
}

/// Returns the same neighbors for every query.
#[derive(Clone, Debug, Default)]
pub struct FixedNeighbors(pub Vec<Neighbor>);

impl NeighborSource for FixedNeighbors {
    fn retrieve(&self, _chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        Ok(self.0.iter().take(k).cloned().collect())
    }
}

fn to_neighbors(ds: &Datastore, hits: &[(u64, f32)]) -> Result<Vec<Neighbor>> {
    hits.iter()
        .map(|&(id, d)| {
            Ok(Neighbor {
                chunk_id: Some(id),
                distance: d,
                tokens: ds.fetch_neighbor_tokens(id)?.to_vec(),
            })
        })
        .collect()
}

/// Approximate search through a trained index over the datastore embeddings.
pub struct IndexRetriever<'a> {
    pub datastore: &'a Datastore,
    pub index: &'a AnnIndex,
    pub nprobe: Option<usize>,
    pub top_n: Option<usize>,
    pub rerank: Option<usize>,
    /// Candidates for which this returns `false` are skipped.
    pub filter: Option<&'a (dyn Fn(u64) -> bool + Sync)>,
}

impl<'a> IndexRetriever<'a> {
    pub fn new(datastore: &'a Datastore, index: &'a AnnIndex) -> Result<Self> {
        if index.dim() != datastore.config().embed_dim {
            return Err(Error::Config(format!(
                "index dimension {} differs from datastore dimension {}",
                index.dim(),
                datastore.config().embed_dim
            )));
        }
        Ok(Self {
            datastore,
            index,
            nprobe: None,
            top_n: None,
            rerank: None,
            filter: None,
        })
    }
}

impl NeighborSource for IndexRetriever<'_> {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = self.datastore.embed_query(chunk);
        let mut params = QueryParams::k(k);
        params.nprobe = self.nprobe;
        params.top_n = self.top_n;
        params.rerank = self.rerank;
        params.filter = self.filter;
        let res = self.index.search(&q, &params)?;
        to_neighbors(self.datastore, &res.hits)
    }
}

/// Exhaustive search over the datastore embeddings.
pub struct ExactRetriever<'a> {
    pub datastore: &'a Datastore,
}

impl NeighborSource for ExactRetriever<'_> {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        let ds = self.datastore;
        let k = k.min(ds.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = ds.embed_query(chunk);
        let hits = brute_force_search(ds.embeddings(), ds.config().embed_dim, &q, k)?;
        to_neighbors(ds, &hits)
    }
}
