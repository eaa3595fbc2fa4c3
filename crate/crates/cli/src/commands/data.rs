//! Datastore access, neighbor sources and chunk-aligned examples shared by the
//! training and evaluation commands.

use std::ops::Range;

use rayon::prelude::*;

use retro_core::ann::{brute_force_search, AnnIndex};
use retro_core::data::{lm_windows, retrieve_slots, LmWindow};
use retro_core::datastore::Datastore;
use retro_core::generation::{IndexRetriever, NeighborSource};
use retro_core::model::{Batch, ModelConfig, Neighbor, NeighborSet};
use retro_core::tokenizer::{TokenId, EOT_ID};
use retro_core::{Error, Result};

use crate::{index_path, RetrievalArgs, RunConfig};

/// Makes `cfg.datastore` describe `ds`: adopted when no configuration file was
/// given, checked otherwise.
pub(crate) fn reconcile_datastore(cfg: &mut RunConfig, ds: &Datastore, explicit: bool) -> Result<()> {
    if !explicit {
        cfg.datastore = ds.config().clone();
        return Ok(());
    }
    if &cfg.datastore != ds.config() {
        return Err(Error::Config(format!(
            "datastore was built with {:?} but the configuration says {:?}",
            ds.config(),
            cfg.datastore
        )));
    }
    Ok(())
}

pub(crate) fn reconcile_model(cfg: &mut RunConfig, model: &ModelConfig, explicit: bool) -> Result<()> {
    if !explicit {
        cfg.model = model.clone();
        return Ok(());
    }
    if &cfg.model != model {
        return Err(Error::Config(format!(
            "checkpoint was trained with {model:?} but the configuration says {:?}",
            cfg.model
        )));
    }
    Ok(())
}

/// Datastore plus an optional index. Without an index, search is exhaustive.
pub struct Retrieval {
    pub datastore: Datastore,
    pub index: Option<AnnIndex>,
}

impl Retrieval {
    /// Opens the datastore named by `args`, if any, and its index unless
    /// `--exact` was given.
    pub fn open(args: &RetrievalArgs) -> Result<Option<Self>> {
        let Some(db) = &args.db else {
            return Ok(None);
        };
        let datastore = Datastore::open(db)?;
        let index = if args.exact {
            None
        } else {
            Some(AnnIndex::load(&index_path(db, args.index.as_ref()))?)
        };
        Ok(Some(Self { datastore, index }))
    }

    pub fn source<'a>(&'a self, nprobe: Option<usize>, exclude: Option<Range<u64>>) -> Result<Box<dyn NeighborSource + 'a>> {
        Ok(match &self.index {
            Some(index) => {
                let mut r = IndexRetriever::new(&self.datastore, index)?;
                r.nprobe = nprobe;
                Box::new(Filtered {
                    inner: FilteredSource::Index(r),
                    exclude,
                })
            }
            None => Box::new(Filtered {
                inner: FilteredSource::Exact(&self.datastore),
                exclude,
            }),
        })
    }

    /// Chunk-id range of the datastore document named `id`.
    pub fn doc_range(&self, id: &str) -> Option<Range<u64>> {
        self.datastore
            .docs()
            .iter()
            .find(|d| d.id == id)
            .map(|d| d.first_chunk..d.first_chunk + d.num_chunks)
    }
}

enum FilteredSource<'a> {
    Index(IndexRetriever<'a>),
    Exact(&'a Datastore),
}

/// Neighbor source that never returns chunk ids inside `exclude`.
struct Filtered<'a> {
    inner: FilteredSource<'a>,
    exclude: Option<Range<u64>>,
}

impl NeighborSource for Filtered<'_> {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        let keep = |id: u64| self.exclude.as_ref().is_none_or(|r| !r.contains(&id));
        let skipped = self.exclude.as_ref().map_or(0, |r| (r.end - r.start) as usize);
        match &self.inner {
            FilteredSource::Index(r) => {
                let r = IndexRetriever {
                    datastore: r.datastore,
                    index: r.index,
                    nprobe: r.nprobe,
                    top_n: Some(k + skipped),
                    rerank: r.rerank,
                    filter: Some(&keep),
                };
                r.retrieve(chunk, k)
            }
            FilteredSource::Exact(ds) => {
                let want = (k + skipped).min(ds.len());
                if want == 0 {
                    return Ok(Vec::new());
                }
                let q = ds.embed_query(chunk);
                brute_force_search(ds.embeddings(), ds.config().embed_dim, &q, want)?
                    .into_iter()
                    .filter(|&(id, _)| keep(id))
                    .take(k)
                    .map(|(id, d)| {
                        Ok(Neighbor {
                            chunk_id: Some(id),
                            distance: d,
                            tokens: ds.fetch_neighbor_tokens(id)?.to_vec(),
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Caps every query at `k` neighbors; the model pads the rest.
pub(crate) struct Limited<'a> {
    pub inner: &'a dyn NeighborSource,
    pub k: usize,
}

impl NeighborSource for Limited<'_> {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        self.inner.retrieve(chunk, k.min(self.k))
    }
}

/// A document's tokens followed by end-of-text, with the datastore chunks that
/// must not be retrieved for it.
#[derive(Clone, Debug)]
pub struct Doc {
    pub tokens: Vec<TokenId>,
    pub exclude: Option<Range<u64>>,
}

/// Token streams of every document stored in `ds`, in datastore order.
pub fn doc_streams(ds: &Datastore, exclude_self: bool) -> Result<Vec<Doc>> {
    let m = ds.chunk_size();
    ds.docs()
        .iter()
        .map(|d| {
            let mut tokens = Vec::with_capacity(d.num_tokens + 1);
            for c in d.first_chunk..d.first_chunk + d.num_chunks {
                tokens.extend_from_slice(&ds.fetch_neighbor_tokens(c)?[..m]);
            }
            tokens.truncate(d.num_tokens);
            tokens.push(EOT_ID);
            Ok(Doc {
                tokens,
                exclude: exclude_self.then(|| d.first_chunk..d.first_chunk + d.num_chunks),
            })
        })
        .collect()
}

/// Fixed-length windows with their retrieved neighbor slots.
pub struct Examples {
    pub windows: Vec<LmWindow>,
    pub slots: Vec<Vec<Vec<Neighbor>>>,
    config: ModelConfig,
}

impl Examples {
    /// Splits each document into `max_seq` windows and retrieves neighbors for
    /// every window chunk. Models without cross-attention get pad neighbors.
    pub fn build(docs: &[Doc], config: &ModelConfig, retrieval: Option<&Retrieval>, nprobe: Option<usize>) -> Result<Self> {
        let (k, len) = (config.k_neighbors, config.neighbor_len());
        let chunks = config.max_seq / config.chunk_size;
        let per_doc: Vec<Vec<(LmWindow, Vec<Vec<Neighbor>>)>> = docs
            .par_iter()
            .map(|doc| {
                let source = match retrieval {
                    Some(r) if !config.is_gpt() => Some(r.source(nprobe, doc.exclude.clone())?),
                    _ => None,
                };
                lm_windows(&doc.tokens, config.max_seq)
                    .into_iter()
                    .map(|w| {
                        let slots = match &source {
                            Some(src) => retrieve_slots(&w.tokens, &w.pad, config, src.as_ref())?,
                            None => vec![vec![Neighbor::pad(len); k]; chunks],
                        };
                        Ok((w, slots))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let (windows, slots) = per_doc.into_iter().flatten().unzip();
        Ok(Self {
            windows,
            slots,
            config: config.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            tokens: rows.iter().map(|&r| self.windows[r].tokens.clone()).collect(),
            targets: rows.iter().map(|&r| self.windows[r].targets.clone()).collect(),
            loss_mask: rows.iter().map(|&r| self.windows[r].score.clone()).collect(),
            pad_mask: rows.iter().map(|&r| self.windows[r].pad.clone()).collect(),
            neighbors: NeighborSet {
                k: self.config.k_neighbors,
                neighbor_len: self.config.neighbor_len(),
                items: rows.iter().map(|&r| self.slots[r].clone()).collect(),
            },
        }
    }

    /// Consecutive batches of at most `size` windows covering every example once.
    pub fn batches(&self, size: usize) -> Vec<Batch> {
        let rows: Vec<usize> = (0..self.len()).collect();
        rows.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }
}
