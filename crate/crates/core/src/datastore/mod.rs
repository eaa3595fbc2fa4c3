//! Chunk-level retrieval datastore: corpus chunking, frozen chunk embeddings and
//! the on-disk `chunks.bin` / `embeds.bin` / `manifest.json` triple.

mod embed;
mod io;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, TokenId, PAD_ID};

pub use embed::embed_chunk;
pub use io::sha256_hex;
pub use io::{CHUNKS_FILE, CHUNKS_HEADER_LEN, EMBEDS_FILE, MANIFEST_FILE};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatastoreConfig {
    pub chunk_size: usize,
    pub embed_dim: usize,
    pub hash_seed: u64,
}

impl Default for DatastoreConfig {
    fn default() -> Self {
        Self {
            chunk_size: 64,
            embed_dim: 64,
            hash_seed: 0,
        }
    }
}

impl DatastoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size < 2 {
            return Err(Error::Config(format!("chunk_size must be >= 2, got {}", self.chunk_size)));
        }
        if self.embed_dim < 8 {
            return Err(Error::Config(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        Ok(())
    }
}

/// One chunk of `m` tokens plus the `m` tokens that follow it in the same document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkRecord {
    pub chunk_id: u64,
    pub doc_id: u64,
    pub offset: usize,
    pub tokens: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

/// Splits a document into pad-filled `m`-token chunks with their continuations.
///
/// Chunk and document ids are left at zero; callers assign them.
pub fn chunk_document(tokens: &[TokenId], m: usize) -> Result<Vec<ChunkRecord>> {
    if m < 2 {
        return Err(Error::Config(format!("chunk size must be >= 2, got {m}")));
    }
    let padded: Vec<Vec<TokenId>> = tokens
        .chunks(m)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(m, PAD_ID);
            v
        })
        .collect();
    Ok(padded
        .iter()
        .enumerate()
        .map(|(i, chunk)| ChunkRecord {
            chunk_id: 0,
            doc_id: 0,
            offset: i * m,
            tokens: chunk.clone(),
            continuation: padded.get(i + 1).cloned().unwrap_or_else(|| vec![PAD_ID; m]),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub id: String,
    pub num_tokens: usize,
    pub first_chunk: u64,
    pub num_chunks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatastoreManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: DatastoreConfig,
    pub num_chunks: u64,
    pub docs: Vec<DocEntry>,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
}

/// In-memory view of a built datastore. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    config: DatastoreConfig,
    /// `N × 2m` token ids: chunk followed by continuation.
    records: Vec<TokenId>,
    /// `N × d` unit-norm embeddings.
    embeddings: Vec<f32>,
    docs: Vec<DocEntry>,
}

impl Datastore {
    /// Builds a datastore from `(doc id, tokens)` pairs, assigning dense chunk ids in order.
    pub fn from_documents(docs: &[(String, Vec<TokenId>)], config: &DatastoreConfig) -> Result<Self> {
        config.validate()?;
        let m = config.chunk_size;
        let mut records = Vec::new();
        let mut entries = Vec::with_capacity(docs.len());
        let mut next_chunk = 0u64;
        for (id, tokens) in docs {
            let chunks = chunk_document(tokens, m)?;
            entries.push(DocEntry {
                id: id.clone(),
                num_tokens: tokens.len(),
                first_chunk: next_chunk,
                num_chunks: chunks.len() as u64,
            });
            next_chunk += chunks.len() as u64;
            for c in chunks {
                records.extend_from_slice(&c.tokens);
                records.extend_from_slice(&c.continuation);
            }
        }
        let embeddings: Vec<f32> = records
            .par_chunks(2 * m)
            .flat_map_iter(|rec| embed_chunk(&rec[..m], config))
            .collect();
        Ok(Self {
            config: config.clone(),
            records,
            embeddings,
            docs: entries,
        })
    }

    pub fn config(&self) -> &DatastoreConfig {
        &self.config
    }

    pub fn chunk_size(&self) -> usize {
        self.config.chunk_size
    }

    pub fn len(&self) -> usize {
        self.records.len() / (2 * self.config.chunk_size)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn docs(&self) -> &[DocEntry] {
        &self.docs
    }

    /// All embeddings, row-major `N × d`.
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn embedding(&self, chunk_id: u64) -> Result<&[f32]> {
        self.check_id(chunk_id)?;
        let d = self.config.embed_dim;
        let i = chunk_id as usize;
        Ok(&self.embeddings[i * d..(i + 1) * d])
    }

    fn check_id(&self, chunk_id: u64) -> Result<()> {
        if (chunk_id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::Lookup(format!(
                "chunk id {chunk_id} out of range (datastore has {} chunks)",
                self.len()
            )))
        }
    }

    /// The `2m` tokens of a neighbor: the chunk followed by its continuation.
    pub fn fetch_neighbor_tokens(&self, chunk_id: u64) -> Result<&[TokenId]> {
        self.check_id(chunk_id)?;
        let w = 2 * self.config.chunk_size;
        let i = chunk_id as usize;
        Ok(&self.records[i * w..(i + 1) * w])
    }

    pub fn record(&self, chunk_id: u64) -> Result<ChunkRecord> {
        let toks = self.fetch_neighbor_tokens(chunk_id)?;
        let m = self.config.chunk_size;
        let doc_idx = self.docs.partition_point(|d| d.first_chunk + d.num_chunks <= chunk_id);
        let doc = &self.docs[doc_idx];
        Ok(ChunkRecord {
            chunk_id,
            doc_id: doc_idx as u64,
            offset: (chunk_id - doc.first_chunk) as usize * m,
            tokens: toks[..m].to_vec(),
            continuation: toks[m..].to_vec(),
        })
    }

    /// Embeds arbitrary query tokens with the same frozen embedder used for the keys.
    pub fn embed_query(&self, tokens: &[TokenId]) -> Vec<f32> {
        embed_chunk(tokens, &self.config)
    }

    pub fn manifest(&self) -> DatastoreManifest {
        let (chunks, embeds) = (io::encode_chunks(self), io::encode_embeds(self));
        self.manifest_with(&chunks, &embeds)
    }

    fn manifest_with(&self, chunks: &[u8], embeds: &[u8]) -> DatastoreManifest {
        let mut checksums = BTreeMap::new();
        checksums.insert(CHUNKS_FILE.to_string(), io::sha256_hex(chunks));
        checksums.insert(EMBEDS_FILE.to_string(), io::sha256_hex(embeds));
        DatastoreManifest {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            num_chunks: self.len() as u64,
            docs: self.docs.clone(),
            checksums,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<DatastoreManifest> {
        io::save(self, dir)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        io::open(dir)
    }
}

/// Reads a JSONL corpus of `{"id", "text"}` objects.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push((doc.id, doc.text));
    }
    Ok(docs)
}

/// Tokenizes a JSONL corpus, builds the datastore and writes it to `out_dir`.
pub fn build_datastore(corpus_path: &Path, config: &DatastoreConfig, out_dir: &Path) -> Result<Datastore> {
    let docs: Vec<(String, Vec<TokenId>)> = read_corpus(corpus_path)?
        .into_iter()
        .map(|(id, text)| (id, tokenizer::encode(&text)))
        .collect();
    let ds = Datastore::from_documents(&docs, config)?;
    ds.save(out_dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_130_tokens() {
        let toks: Vec<TokenId> = (0..130).map(|i| (i % 256) as TokenId).collect();
        let chunks = chunk_document(&toks, 64).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].tokens[..2], [128, 129]);
        assert!(chunks[2].tokens[2..].iter().all(|&t| t == PAD_ID));
        assert_eq!(chunks[0].continuation, chunks[1].tokens);
        assert!(chunks.iter().enumerate().all(|(i, c)| c.offset == 64 * i));
    }

    #[test]
    fn exact_chunk_has_pad_continuation() {
        let toks: Vec<TokenId> = (0..64).collect();
        let chunks = chunk_document(&toks, 64).unwrap();
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].continuation.iter().all(|&t| t == PAD_ID));
    }

    #[test]
    fn empty_document_and_bad_m() {
        assert!(chunk_document(&[], 4).unwrap().is_empty());
        assert!(matches!(chunk_document(&[1, 2], 1), Err(Error::Config(_))));
    }

    #[test]
    fn records_and_lookup() {
        let docs = vec![
            ("a".to_string(), (0..100).collect::<Vec<TokenId>>()),
            ("b".to_string(), (100..164).collect::<Vec<TokenId>>()),
        ];
        let ds = Datastore::from_documents(&docs, &DatastoreConfig::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let last_of_a = ds.fetch_neighbor_tokens(1).unwrap();
        assert_eq!(last_of_a.len(), 128);
        assert!(last_of_a[64..].iter().all(|&t| t == PAD_ID));
        let r = ds.record(2).unwrap();
        assert_eq!((r.doc_id, r.offset), (1, 0));
        assert_eq!(r.tokens[0], 100);
        assert!(matches!(ds.fetch_neighbor_tokens(3), Err(Error::Lookup(_))));
    }
}
