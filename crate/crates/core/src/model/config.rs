use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Architecture of the decoder, its chunked cross-attention layers and the
/// neighbor encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub chunk_size: usize,
    pub k_neighbors: usize,
    /// 1-based decoder layer indices carrying chunked cross-attention. Empty
    /// gives the plain GPT ablation.
    pub cca_layers: Vec<usize>,
    pub enc_layers: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 128,
            n_heads: 4,
            chunk_size: 64,
            k_neighbors: 2,
            cca_layers: vec![2, 3, 4],
            enc_layers: 2,
            max_seq: 512,
            vocab: VOCAB_SIZE,
            mlp_ratio: 4,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return fail(format!("hidden {} not divisible by n_heads {}", self.hidden, self.n_heads));
        }
        if self.chunk_size < 2 {
            return fail(format!("chunk_size must be >= 2, got {}", self.chunk_size));
        }
        if self.max_seq == 0 || !self.max_seq.is_multiple_of(self.chunk_size) {
            return fail(format!(
                "max_seq {} is not a positive multiple of chunk_size {}",
                self.max_seq, self.chunk_size
            ));
        }
        if let Some(&bad) = self.cca_layers.iter().find(|&&l| l == 0 || l > self.n_layers) {
            return fail(format!("cca layer {bad} outside 1..={}", self.n_layers));
        }
        if self.vocab == 0 || self.mlp_ratio == 0 {
            return fail("vocab and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Tokens per retrieved neighbor: the chunk plus its continuation.
    pub fn neighbor_len(&self) -> usize {
        2 * self.chunk_size
    }

    pub fn is_gpt(&self) -> bool {
        self.cca_layers.is_empty() || self.k_neighbors == 0
    }

    pub fn has_cca(&self, layer: usize) -> bool {
        self.k_neighbors > 0 && self.cca_layers.contains(&(layer + 1))
    }

    /// Same architecture with chunked cross-attention removed.
    pub fn gpt_ablation(&self) -> Self {
        Self {
            cca_layers: Vec::new(),
            ..self.clone()
        }
    }
}
