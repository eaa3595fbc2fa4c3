use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{batch_pad_qa, QaSample};
use crate::model::{normalize_slot, per_sample_nll, Batch, Neighbor, NeighborSet, RetroParams};
use crate::scalar::Scalar;
use crate::tokenizer::{ByteTokenizer, TokenId, Tokenizer};

/// `exp` of the mean next-token negative log-likelihood over every scored position.
pub fn perplexity<T: Scalar>(params: &RetroParams<T>, batches: &[Batch]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for b in batches {
        for (s, c) in per_sample_nll(params, b)? {
            sum += s;
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Argument("perplexity over an empty token stream".into()));
    }
    Ok((sum / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McInstance {
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
}

impl McInstance {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 || self.gold_index >= self.candidates.len() {
            return Err(Error::Argument(format!(
                "multiple-choice instance needs >= 2 candidates and a valid gold index, got {} / {}",
                self.candidates.len(),
                self.gold_index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McChoice {
    pub index: usize,
    /// Candidate log-probabilities (per token when length-normalized).
    pub scores: Vec<f64>,
}

/// Scores each candidate as an answer chunk after the question chunk(s) and
/// picks the most probable; ties go to the lowest index.
pub fn multiple_choice<T: Scalar>(
    params: &RetroParams<T>,
    question: &[TokenId],
    candidates: &[Vec<TokenId>],
    evidence: &[Neighbor],
    length_normalized: bool,
) -> Result<McChoice> {
    let c = &params.config;
    if candidates.is_empty() || candidates.iter().any(Vec::is_empty) {
        return Err(Error::Argument("every candidate needs at least one token".into()));
    }
    let samples: Vec<QaSample> = candidates
        .iter()
        .map(|a| QaSample {
            context: question.to_vec(),
            answer: a.clone(),
        })
        .collect();
    let padded = batch_pad_qa(&samples, c.chunk_size, c.max_seq)?;
    let slot = normalize_slot(evidence.to_vec(), c.k_neighbors, c.neighbor_len());
    let neighbors = NeighborSet {
        k: c.k_neighbors,
        neighbor_len: c.neighbor_len(),
        items: vec![vec![slot; padded.chunks]; candidates.len()],
    };
    let nll = per_sample_nll(params, &padded.into_batch(neighbors))?;
    let scores: Vec<f64> = nll
        .iter()
        .map(|&(s, n)| if length_normalized { -s / n as f64 } else { -s })
        .collect();
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(McChoice { index, scores })
}

/// Byte-tokenizes an instance: the question as context, each candidate preceded by a space.
pub fn mc_tokens(inst: &McInstance) -> (Vec<TokenId>, Vec<Vec<TokenId>>) {
    let tok = ByteTokenizer;
    let q = tok.encode(&inst.question);
    let cands = inst.candidates.iter().map(|c| tok.encode(&format!(" {c}"))).collect();
    (q, cands)
}
