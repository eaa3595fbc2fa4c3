use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD_ID};

/// One retrieved neighbor: chunk tokens followed by continuation tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub chunk_id: Option<u64>,
    pub distance: f32,
    pub tokens: Vec<TokenId>,
}

impl Neighbor {
    pub fn pad(len: usize) -> Self {
        Self {
            chunk_id: None,
            distance: f32::INFINITY,
            tokens: vec![PAD_ID; len],
        }
    }

    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Self {
            chunk_id: None,
            distance: 0.0,
            tokens,
        }
    }
}

/// `items[b][i]` holds the `k` neighbors retrieved with input chunk `i` of batch item `b`.
/// Chunk `i` of the decoder attends to `items[b][i - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub k: usize,
    pub neighbor_len: usize,
    pub items: Vec<Vec<Vec<Neighbor>>>,
}

impl NeighborSet {
    /// All-pad neighbors for `batch` items of `chunks` chunks each.
    pub fn padded(batch: usize, chunks: usize, k: usize, neighbor_len: usize) -> Self {
        Self {
            k,
            neighbor_len,
            items: vec![vec![vec![Neighbor::pad(neighbor_len); k]; chunks]; batch],
        }
    }

    /// Builds a set from raw token slots, padding missing neighbors and
    /// padding/truncating each sequence to `neighbor_len`.
    pub fn from_tokens(items: Vec<Vec<Vec<Vec<TokenId>>>>, k: usize, neighbor_len: usize) -> Self {
        let items = items
            .into_iter()
            .map(|chunks| {
                chunks
                    .into_iter()
                    .map(|slot| normalize_slot(slot.into_iter().map(Neighbor::from_tokens).collect(), k, neighbor_len))
                    .collect()
            })
            .collect();
        Self { k, neighbor_len, items }
    }

    pub fn batch(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self, batch: usize, chunks: usize) -> Result<()> {
        if self.items.len() != batch {
            return Err(Error::Shape(format!("neighbor set has {} items, batch has {batch}", self.items.len())));
        }
        for (b, item) in self.items.iter().enumerate() {
            if item.len() < chunks.saturating_sub(1) {
                return Err(Error::Shape(format!(
                    "item {b}: {} neighbor slots for {chunks} chunks",
                    item.len()
                )));
            }
            for slot in item {
                if slot.len() != self.k || slot.iter().any(|n| n.tokens.len() != self.neighbor_len) {
                    return Err(Error::Shape(format!(
                        "item {b}: every slot needs {} neighbors of {} tokens",
                        self.k, self.neighbor_len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pads a retrieved slot with all-pad neighbors (or truncates it) to exactly `k`
/// neighbors of `len` tokens.
pub fn normalize_slot(mut slot: Vec<Neighbor>, k: usize, len: usize) -> Vec<Neighbor> {
    slot.truncate(k);
    for n in &mut slot {
        n.tokens.resize(len, PAD_ID);
    }
    while slot.len() < k {
        slot.push(Neighbor::pad(len));
    }
    slot
}
