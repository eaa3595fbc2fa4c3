//! Retrieval-aware decoding: left padding, sampling, neighbor refresh and QA formatting.

mod qa;
mod retrieval;

pub use qa::{
    answer_tokens, batch_pad_qa, evidence_neighbors, format_qa, read_qa, render_template, Evidence, PaddedQa,
    QaPrompt, QaRecord, QaSample, QaTemplate,
};
pub use retrieval::{ExactRetriever, FixedNeighbors, IndexRetriever, NeighborSource};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_sample, normalize_slot, Neighbor, RetroParams};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, EOT_ID, PAD_ID};

/// Prepends pads so the last context token closes a chunk.
pub fn left_pad(tokens: &[TokenId], m: usize) -> (Vec<TokenId>, usize) {
    let pads = (m - tokens.len() % m) % m;
    let mut out = vec![PAD_ID; pads];
    out.extend_from_slice(tokens);
    (out, pads)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    #[default]
    Nucleus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub strategy: Strategy,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nucleus,
            top_p: 0.9,
            max_tokens: 200,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Ids kept by nucleus filtering: the shortest prefix of the descending order
/// (ties by id) whose cumulative probability reaches `p`.
pub fn nucleus_support(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for &i in &order {
        cum += probs[i];
        keep += 1;
        if cum >= p {
            break;
        }
    }
    order.truncate(keep);
    order
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn sample_token<T: Scalar>(logits: &[T], params: &SamplingParams, rng: &mut impl Rng) -> Result<TokenId> {
    if logits.is_empty() {
        return Err(Error::Shape("empty logits row".into()));
    }
    let row: Vec<f64> = logits.iter().map(|v| v.to_f64_lossless()).collect();
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if params.strategy == Strategy::Greedy {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return Ok(best as TokenId);
    }
    let scaled: Vec<f64> = row.iter().map(|v| v / params.temperature).collect();
    let probs = softmax_f64(&scaled);
    let support = nucleus_support(&probs, params.top_p);
    let total: f64 = support.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in &support {
        u -= probs[i];
        if u < 0.0 {
            return Ok(i as TokenId);
        }
    }
    Ok(*support.last().expect("softmax leaves at least one positive entry") as TokenId)
}

/// Incremental decoder state for one sequence.
///
/// The buffer always holds a whole number of chunks. While left pads remain,
/// each new token shifts the buffer left by one; afterwards tokens fill the
/// last chunk and a fresh pad chunk is opened when it is full.
pub struct GenerationSession<'a, T: Scalar> {
    params: &'a RetroParams<T>,
    source: &'a dyn NeighborSource,
    retrieval_step: usize,
    buffer: Vec<TokenId>,
    left_pads: usize,
    filled: usize,
    slots: Vec<Vec<Neighbor>>,
    since_retrieval: usize,
    refresh_queries: usize,
    prefill_queries: usize,
}

impl<'a, T: Scalar> GenerationSession<'a, T> {
    pub fn new(params: &'a RetroParams<T>, source: &'a dyn NeighborSource, retrieval_step: usize) -> Result<Self> {
        let m = params.config.chunk_size;
        if retrieval_step == 0 || retrieval_step > m {
            return Err(Error::Config(format!("retrieval step must be in 1..={m}, got {retrieval_step}")));
        }
        Ok(Self {
            params,
            source,
            retrieval_step,
            buffer: Vec::new(),
            left_pads: 0,
            filled: 0,
            slots: Vec::new(),
            since_retrieval: 0,
            refresh_queries: 0,
            prefill_queries: 0,
        })
    }

    fn m(&self) -> usize {
        self.params.config.chunk_size
    }

    fn retrieves(&self) -> bool {
        !self.params.config.is_gpt()
    }

    fn pad_slot(&self) -> Vec<Neighbor> {
        let c = &self.params.config;
        vec![Neighbor::pad(c.neighbor_len()); c.k_neighbors]
    }

    fn query(&self, chunk: &[TokenId]) -> Result<Vec<Neighbor>> {
        let c = &self.params.config;
        let got = self.source.retrieve(chunk, c.k_neighbors)?;
        Ok(normalize_slot(got, c.k_neighbors, c.neighbor_len()))
    }

    /// Aligns the prompt and retrieves neighbors for every context chunk before
    /// the one holding the prediction position. An empty prompt starts from a
    /// single end-of-text token.
    pub fn start(&mut self, prompt: &[TokenId]) -> Result<()> {
        let c = &self.params.config;
        let prompt: Vec<TokenId> = if prompt.is_empty() { vec![EOT_ID] } else { prompt.to_vec() };
        if prompt.len() > c.max_seq {
            return Err(Error::Length(format!(
                "prompt of {} tokens exceeds max_seq {}",
                prompt.len(),
                c.max_seq
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(Error::Vocab(bad));
        }
        let (buffer, pads) = left_pad(&prompt, self.m());
        self.filled = buffer.len();
        self.buffer = buffer;
        self.left_pads = pads;
        self.since_retrieval = 0;
        self.refresh_queries = 0;
        self.prefill_queries = 0;
        let l = self.buffer.len() / self.m();
        self.slots = vec![self.pad_slot(); l];
        if self.retrieves() {
            let m = self.m();
            for i in 0..self.refresh_slot() {
                let chunk = &self.buffer[i * m..(i + 1) * m];
                if chunk.iter().all(|&t| t == PAD_ID) {
                    continue;
                }
                self.slots[i] = self.query(chunk)?;
                self.prefill_queries += 1;
            }
        }
        Ok(())
    }

    fn prediction_pos(&self) -> usize {
        self.filled - 1
    }

    /// Slot read by the chunk holding the prediction position.
    fn refresh_slot(&self) -> usize {
        (self.prediction_pos() / self.m()).max(1) - 1
    }

    fn refresh(&mut self) -> Result<()> {
        let m = self.m();
        let end = self.filled;
        let q = self.query(&self.buffer[end - m..end])?;
        let slot = self.refresh_slot();
        self.slots[slot] = q;
        self.refresh_queries += 1;
        Ok(())
    }

    fn pad_mask(&self) -> Vec<bool> {
        (0..self.buffer.len())
            .map(|i| i < self.left_pads || i >= self.filled)
            .collect()
    }

    fn push(&mut self, tok: TokenId) {
        let m = self.m();
        if self.left_pads > 0 {
            self.buffer.remove(0);
            self.buffer.push(tok);
            self.left_pads -= 1;
            return;
        }
        if self.filled < self.buffer.len() {
            self.buffer[self.filled] = tok;
            self.filled += 1;
            return;
        }
        if self.buffer.len() + m > self.params.config.max_seq {
            self.buffer.drain(..m);
            self.slots.remove(0);
            self.filled -= m;
        }
        self.buffer.push(tok);
        self.buffer.extend(std::iter::repeat_n(PAD_ID, m - 1));
        self.filled += 1;
        let pad = self.pad_slot();
        self.slots.push(pad);
    }

    /// Next-token logits at the prediction position, refreshing neighbors first
    /// when the retrieval step is due.
    pub fn next_logits(&mut self) -> Result<Vec<T>> {
        if self.buffer.is_empty() {
            return Err(Error::Argument("session not started".into()));
        }
        if self.retrieves() && self.since_retrieval == 0 {
            self.refresh()?;
        }
        let pad = self.pad_mask();
        let slots = if self.retrieves() { Some(self.slots.as_slice()) } else { None };
        let cache = forward_sample(self.params, &self.buffer, &pad, slots)?;
        cache.last_logits(self.params, self.prediction_pos())
    }

    /// Appends a sampled token and advances the retrieval counter. The latest
    /// retrieval stays attached to the prediction chunk until the next refresh.
    pub fn accept(&mut self, tok: TokenId) {
        let current = self.slots[self.refresh_slot()].clone();
        self.push(tok);
        let target = self.refresh_slot();
        self.slots[target] = current;
        self.since_retrieval = (self.since_retrieval + 1) % self.retrieval_step;
    }

    /// Samples up to `max_tokens` tokens, stopping before an end-of-text token.
    pub fn generate(&mut self, prompt: &[TokenId], sampling: &SamplingParams) -> Result<Vec<TokenId>> {
        sampling.validate()?;
        self.start(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut out = Vec::with_capacity(sampling.max_tokens);
        for _ in 0..sampling.max_tokens {
            let logits = self.next_logits()?;
            let tok = sample_token(&logits, sampling, &mut rng)?;
            if tok == EOT_ID {
                break;
            }
            out.push(tok);
            self.accept(tok);
        }
        Ok(out)
    }

    pub fn buffer(&self) -> &[TokenId] {
        &self.buffer
    }

    pub fn left_pad_count(&self) -> usize {
        self.left_pads
    }

    pub fn tokens_since_retrieval(&self) -> usize {
        self.since_retrieval
    }

    /// Index queries issued while generating (one every `retrieval_step` tokens).
    pub fn refresh_queries(&self) -> usize {
        self.refresh_queries
    }

    /// Queries issued for earlier context chunks when the session started.
    pub fn prefill_queries(&self) -> usize {
        self.prefill_queries
    }

    pub fn neighbor_slots(&self) -> &[Vec<Neighbor>] {
        &self.slots
    }
}

#[cfg(test)]
mod tests;
