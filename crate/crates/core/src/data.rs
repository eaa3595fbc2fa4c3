//! Turning token streams into chunk-aligned language-model batches with neighbors.

use crate::error::{Error, Result};
use crate::generation::NeighborSource;
use crate::model::{normalize_slot, Batch, ModelConfig, Neighbor, NeighborSet};
use crate::tokenizer::{TokenId, PAD_ID};

/// A length-`n` slice of a stream with next-token targets. The final window
/// of a stream is right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmWindow {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub pad: Vec<bool>,
    pub score: Vec<bool>,
}

/// Non-overlapping windows of `n` inputs; every stream token after the first is
/// predicted exactly once.
pub fn lm_windows(stream: &[TokenId], n: usize) -> Vec<LmWindow> {
    let mut out = Vec::new();
    if n == 0 || stream.len() < 2 {
        return out;
    }
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + n).min(stream.len() - 1);
        let real = end - start;
        let mut tokens = stream[start..end].to_vec();
        let mut targets = stream[start + 1..end + 1].to_vec();
        tokens.resize(n, PAD_ID);
        targets.resize(n, PAD_ID);
        let pad: Vec<bool> = (0..n).map(|i| i >= real).collect();
        let score = pad.iter().map(|&p| !p).collect();
        out.push(LmWindow {
            tokens,
            targets,
            pad,
            score,
        });
        start = end;
    }
    out
}

/// Neighbors retrieved with each chunk of `tokens` that is consumed by a later
/// chunk. Chunks made only of padding get all-pad neighbors.
pub fn retrieve_slots(
    tokens: &[TokenId],
    pad: &[bool],
    config: &ModelConfig,
    source: &dyn NeighborSource,
) -> Result<Vec<Vec<Neighbor>>> {
    let m = config.chunk_size;
    if !tokens.len().is_multiple_of(m) || pad.len() != tokens.len() {
        return Err(Error::Alignment(format!(
            "{} tokens / {} pad flags for chunk size {m}",
            tokens.len(),
            pad.len()
        )));
    }
    let (k, len) = (config.k_neighbors, config.neighbor_len());
    let chunks = tokens.len() / m;
    let mut slots = Vec::with_capacity(chunks);
    for i in 0..chunks {
        let range = i * m..(i + 1) * m;
        if i + 1 == chunks || pad[range.clone()].iter().all(|&p| p) {
            slots.push(vec![Neighbor::pad(len); k]);
            continue;
        }
        slots.push(normalize_slot(source.retrieve(&tokens[range], k)?, k, len));
    }
    Ok(slots)
}

/// Batch over `windows`; neighbors come from `source` unless the model has no
/// cross-attention.
pub fn window_batch(windows: &[LmWindow], config: &ModelConfig, source: Option<&dyn NeighborSource>) -> Result<Batch> {
    let chunks = windows.first().map_or(0, |w| w.tokens.len() / config.chunk_size);
    let neighbors = match source {
        Some(src) if !config.is_gpt() => {
            let items = windows
                .iter()
                .map(|w| retrieve_slots(&w.tokens, &w.pad, config, src))
                .collect::<Result<_>>()?;
            NeighborSet {
                k: config.k_neighbors,
                neighbor_len: config.neighbor_len(),
                items,
            }
        }
        _ => NeighborSet::padded(windows.len(), chunks, config.k_neighbors, config.neighbor_len()),
    };
    Ok(Batch {
        tokens: windows.iter().map(|w| w.tokens.clone()).collect(),
        targets: windows.iter().map(|w| w.targets.clone()).collect(),
        loss_mask: windows.iter().map(|w| w.score.clone()).collect(),
        pad_mask: windows.iter().map(|w| w.pad.clone()).collect(),
        neighbors,
    })
}
