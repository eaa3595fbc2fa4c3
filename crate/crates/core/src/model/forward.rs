use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::layers::{embedding_backward, embedding_forward, LayerNormCache};
use crate::numerics::layers::{layer_norm_backward, layer_norm_forward};
use crate::numerics::{matmul, matmul_nt, matmul_tn, ParamTensors, Tensor};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, PAD_ID};

use super::blocks::{
    add_rows, cca_backward, cca_forward, encode_slot, encode_slot_backward, mlp_backward, mlp_forward,
    self_attn_backward, self_attn_forward, slice_rows, CcaCache, EncodedSlot, EncoderCache, MlpCache, SelfAttnCache,
};
use super::config::ModelConfig;
use super::neighbors::{Neighbor, NeighborSet};
use super::params::{CrossAttention, DecoderLayer, RetroParams};

/// One training or evaluation batch. All sequences share the same length.
///
/// `targets[b][t]` is the token predicted at position `t`; `loss_mask` selects
/// the positions that contribute to the loss and `pad_mask` marks padding in
/// `tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub neighbors: NeighborSet,
}

impl Batch {
    /// Next-token batch from windows of `n + 1` unpadded tokens.
    pub fn from_windows(windows: &[Vec<TokenId>], neighbors: NeighborSet) -> Result<Self> {
        let mut tokens = Vec::with_capacity(windows.len());
        let mut targets = Vec::with_capacity(windows.len());
        for w in windows {
            if w.len() < 2 {
                return Err(Error::Length(format!("window of {} tokens", w.len())));
            }
            tokens.push(w[..w.len() - 1].to_vec());
            targets.push(w[1..].to_vec());
        }
        let loss_mask = tokens.iter().map(|t| vec![true; t.len()]).collect();
        let pad_mask = tokens.iter().map(|t| vec![false; t.len()]).collect();
        Ok(Self {
            tokens,
            targets,
            loss_mask,
            pad_mask,
            neighbors,
        })
    }

    /// Batch from padded sequences. Position `t` predicts `tokens[t + 1]` and is
    /// scored when `score[t + 1]` holds; the last position is never scored.
    pub fn from_sequences(
        tokens: Vec<Vec<TokenId>>,
        pad_mask: Vec<Vec<bool>>,
        score: &[Vec<bool>],
        neighbors: NeighborSet,
    ) -> Self {
        let targets = tokens
            .iter()
            .map(|t| t.iter().skip(1).copied().chain(std::iter::once(PAD_ID)).collect())
            .collect();
        let loss_mask = score
            .iter()
            .map(|s| s.iter().skip(1).copied().chain(std::iter::once(false)).collect())
            .collect();
        Self {
            tokens,
            targets,
            loss_mask,
            pad_mask,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = check_sequences(config, &self.tokens, &self.pad_mask, &self.neighbors)?;
        for (b, (t, m)) in self.targets.iter().zip(&self.loss_mask).enumerate() {
            if t.len() != n || m.len() != n {
                return Err(Error::Shape(format!("item {b}: targets/loss_mask length differs from {n}")));
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= config.vocab) {
                return Err(Error::Vocab(bad));
            }
        }
        if self.targets.len() != self.tokens.len() || self.loss_mask.len() != self.tokens.len() {
            return Err(Error::Shape("targets/loss_mask batch size differs from tokens".into()));
        }
        Ok(())
    }
}

fn check_sequences(
    config: &ModelConfig,
    tokens: &[Vec<TokenId>],
    pad_mask: &[Vec<bool>],
    neighbors: &NeighborSet,
) -> Result<usize> {
    let n = tokens.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Shape("empty batch or empty sequence".into()));
    }
    if n > config.max_seq {
        return Err(Error::Length(format!("sequence of {n} tokens exceeds max_seq {}", config.max_seq)));
    }
    if !n.is_multiple_of(config.chunk_size) {
        return Err(Error::Alignment(format!(
            "sequence length {n} is not a multiple of chunk size {}",
            config.chunk_size
        )));
    }
    if pad_mask.len() != tokens.len() {
        return Err(Error::Shape("pad_mask batch size differs from tokens".into()));
    }
    for (b, (t, p)) in tokens.iter().zip(pad_mask).enumerate() {
        if t.len() != n || p.len() != n {
            return Err(Error::Shape(format!("item {b}: expected {n} tokens and pad flags")));
        }
        if let Some(&bad) = t.iter().find(|&&id| id as usize >= config.vocab) {
            return Err(Error::Vocab(bad));
        }
    }
    if !config.is_gpt() {
        if neighbors.k != config.k_neighbors || neighbors.neighbor_len != config.neighbor_len() {
            return Err(Error::Shape(format!(
                "neighbor set has k={} len={}, model expects k={} len={}",
                neighbors.k,
                neighbors.neighbor_len,
                config.k_neighbors,
                config.neighbor_len()
            )));
        }
        neighbors.validate(tokens.len(), n / config.chunk_size)?;
    }
    Ok(n)
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    attn: SelfAttnCache<T>,
    cca: Option<CcaCache<T>>,
    mlp: MlpCache<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct SampleCache<T> {
    ids: Vec<usize>,
    slots: Vec<EncodedSlot<T>>,
    enc: Vec<Vec<EncoderCache<T>>>,
    layers: Vec<LayerCache<T>>,
    ln_f: LayerNormCache<T>,
    hf: Tensor<T>,
}

/// Encodes the neighbor slots consumed by chunks `1..l` of one sequence.
fn encode_slots<T: Scalar>(
    params: &RetroParams<T>,
    item: &[Vec<Neighbor>],
    chunks: usize,
) -> Result<(Vec<EncodedSlot<T>>, Vec<Vec<EncoderCache<T>>>)> {
    let c = &params.config;
    let Some(enc) = &params.encoder else {
        return Ok((Vec::new(), Vec::new()));
    };
    let eps = T::of(c.ln_eps);
    let mut slots = Vec::with_capacity(chunks.saturating_sub(1));
    let mut caches = Vec::with_capacity(chunks.saturating_sub(1));
    for slot in item.iter().take(chunks.saturating_sub(1)) {
        let toks: Vec<&[TokenId]> = slot.iter().map(|n| n.tokens.as_slice()).collect();
        let (s, cs) = encode_slot(enc, &toks, c.hidden, c.n_heads, eps)?;
        slots.push(s);
        caches.push(cs);
    }
    Ok((slots, caches))
}

/// Final hidden states `[n × hidden]` of one sequence with everything needed for backward.
pub(crate) fn forward_sample<T: Scalar>(
    params: &RetroParams<T>,
    tokens: &[TokenId],
    pad: &[bool],
    item: Option<&[Vec<Neighbor>]>,
) -> Result<SampleCache<T>> {
    let c = &params.config;
    let n = tokens.len();
    let eps = T::of(c.ln_eps);
    let chunks = n / c.chunk_size;
    let (slots, enc) = match item {
        Some(item) if !c.is_gpt() => encode_slots(params, item, chunks)?,
        _ => (Vec::new(), Vec::new()),
    };
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = embedding_forward(&params.tok_emb, &ids)?;
    x.add_assign(&slice_rows(&params.pos_emb, 0, n))?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in &params.layers {
        let (x1, attn) = self_attn_forward(&x, &l.ln_attn, &l.attn, c.n_heads, eps, |i, j| j <= i && !pad[j])?;
        x = x1;
        let cca = match &l.cca {
            Some(p) if !slots.is_empty() || chunks < 2 => {
                let (x2, cache) = cca_forward(&x, p, &slots, c.chunk_size, c.n_heads, eps)?;
                x = x2;
                Some(cache)
            }
            _ => None,
        };
        let (x3, mlp) = mlp_forward(&x, &l.ln_mlp, &l.mlp, eps)?;
        x = x3;
        layers.push(LayerCache { attn, cca, mlp });
    }
    let (hf, ln_f) = layer_norm_forward(&x, &params.ln_f.gamma, &params.ln_f.beta, eps)?;
    Ok(SampleCache {
        ids,
        slots,
        enc,
        layers,
        ln_f,
        hf,
    })
}

impl<T: Scalar> SampleCache<T> {
    pub(crate) fn logits(&self, params: &RetroParams<T>) -> Result<Tensor<T>> {
        matmul_nt(&self.hf, &params.tok_emb)
    }

    pub(crate) fn last_logits(&self, params: &RetroParams<T>, pos: usize) -> Result<Vec<T>> {
        Ok(matmul_nt(&slice_rows(&self.hf, pos, pos + 1), &params.tok_emb)?.into_data())
    }
}

/// Accumulates the gradient of `sum(dlogits * logits)` into `grads`.
pub(crate) fn backward_sample<T: Scalar>(
    params: &RetroParams<T>,
    cache: &SampleCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut RetroParams<T>,
) -> Result<()> {
    let c = &params.config;
    grads.tok_emb.add_assign(&matmul_tn(dlogits, &cache.hf)?)?;
    let dhf = matmul(dlogits, &params.tok_emb)?;
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.ln_f,
        &params.ln_f.gamma,
        &mut grads.ln_f.gamma,
        &mut grads.ln_f.beta,
    )?;
    let mut dslots: Vec<Tensor<T>> = cache.slots.iter().map(|s| Tensor::zeros_like(&s.states)).collect();
    for ((lc, p), g) in cache.layers.iter().zip(&params.layers).zip(&mut grads.layers).rev() {
        let DecoderLayer {
            ln_attn,
            attn,
            cca,
            ln_mlp,
            mlp,
        } = g;
        dx = mlp_backward(&dx, &lc.mlp, &p.ln_mlp, &p.mlp, ln_mlp, mlp)?;
        if let (Some(cc), Some(pc), Some(gc)) = (&lc.cca, &p.cca, cca.as_mut()) {
            dx = cca_backward(&dx, cc, pc, gc, &cache.slots, &mut dslots, c.chunk_size)?;
        }
        dx = self_attn_backward(&dx, &lc.attn, &p.ln_attn, &p.attn, ln_attn, attn)?;
    }
    embedding_backward(&dx, &cache.ids, &mut grads.tok_emb);
    add_rows(&mut grads.pos_emb, 0, &dx);
    if let (Some(enc), Some(genc)) = (&params.encoder, grads.encoder.as_mut()) {
        for (ds, ec) in dslots.iter().zip(&cache.enc) {
            encode_slot_backward(ds, ec, enc, genc)?;
        }
    }
    Ok(())
}

/// Logits `[B × n × vocab]`.
pub fn forward<T: Scalar>(
    params: &RetroParams<T>,
    tokens: &[Vec<TokenId>],
    neighbors: &NeighborSet,
    pad_mask: &[Vec<bool>],
) -> Result<Tensor<T>> {
    let c = &params.config;
    let n = check_sequences(c, tokens, pad_mask, neighbors)?;
    let per: Vec<Tensor<T>> = (0..tokens.len())
        .into_par_iter()
        .map(|b| {
            let item = neighbors.items.get(b).map(Vec::as_slice);
            forward_sample(params, &tokens[b], &pad_mask[b], item)?.logits(params)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(tokens.len() * n * c.vocab);
    for t in per {
        data.extend(t.into_data());
    }
    Tensor::new(&[tokens.len(), n, c.vocab], data)
}

/// Encoded neighbor states `[B × l × k × 2m × hidden]` for every slot of every item.
pub fn encode_neighbors<T: Scalar>(params: &RetroParams<T>, neighbors: &NeighborSet) -> Result<Tensor<T>> {
    let c = &params.config;
    let enc = params
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Config("model has no neighbor encoder".into()))?;
    if neighbors.neighbor_len != c.neighbor_len() || neighbors.k != c.k_neighbors {
        return Err(Error::Shape(format!(
            "neighbor set has k={} len={}, model expects k={} len={}",
            neighbors.k,
            neighbors.neighbor_len,
            c.k_neighbors,
            c.neighbor_len()
        )));
    }
    let l = neighbors.items.first().map_or(0, Vec::len);
    neighbors.validate(neighbors.batch(), l + 1)?;
    if neighbors.items.iter().any(|it| it.len() != l) {
        return Err(Error::Shape("items carry different numbers of chunks".into()));
    }
    let eps = T::of(c.ln_eps);
    let mut data = Vec::new();
    for item in &neighbors.items {
        for slot in item {
            let toks: Vec<&[TokenId]> = slot.iter().map(|n| n.tokens.as_slice()).collect();
            let (s, _) = encode_slot(enc, &toks, c.hidden, c.n_heads, eps)?;
            data.extend(s.states.into_data());
        }
    }
    Tensor::new(&[neighbors.batch(), l, neighbors.k, neighbors.neighbor_len, c.hidden], data)
}

/// Applies one chunked cross-attention sub-block to the states of a single
/// sequence, `slots[i]` holding the encoded neighbors retrieved with chunk `i`.
pub fn chunked_cross_attention<T: Scalar>(
    cca: &CrossAttention<T>,
    config: &ModelConfig,
    states: &Tensor<T>,
    slots: &[EncodedSlot<T>],
) -> Result<Tensor<T>> {
    Ok(cca_forward(states, cca, slots, config.chunk_size, config.n_heads, T::of(config.ln_eps))?.0)
}

/// Sum of `-log softmax(logits)[target]` over masked rows, and `scale * (p - onehot)`
/// for those rows.
fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[TokenId],
    mask: &[bool],
    scale: T,
) -> (f64, Tensor<T>) {
    let mut d = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        let row = logits.row(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        total += (lse - row[t as usize]).to_f64_lossless();
        for (o, &v) in d.row_mut(r).iter_mut().zip(row) {
            *o = scale * (v - lse).exp();
        }
        d.row_mut(r)[t as usize] -= scale;
    }
    (total, d)
}

/// Mean masked next-token cross-entropy in nats over logits `[B × n × vocab]`.
/// A batch with no scored position has loss 0.
pub fn lm_loss<T: Scalar>(logits: &Tensor<T>, targets: &[Vec<TokenId>], loss_mask: &[Vec<bool>]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != targets.len() || shape[0] != loss_mask.len() {
        return Err(Error::Shape(format!(
            "logits {shape:?} against {} target rows",
            targets.len()
        )));
    }
    let (n, v) = (shape[1], shape[2]);
    let count = loss_mask.iter().flatten().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("lm_loss: every position is masked, returning 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (b, (t, m)) in targets.iter().zip(loss_mask).enumerate() {
        if t.len() != n || m.len() != n {
            return Err(Error::Shape(format!("item {b}: expected {n} targets")));
        }
        if let Some(&bad) = t.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Vocab(bad));
        }
        let rows = Tensor::new(&[n, v], logits.data()[b * n * v..(b + 1) * n * v].to_vec())?;
        total += cross_entropy(&rows, t, m, T::one()).0;
    }
    Ok(total / count as f64)
}

/// Summed masked negative log-likelihood and scored-position count of each item.
pub fn per_sample_nll<T: Scalar>(params: &RetroParams<T>, batch: &Batch) -> Result<Vec<(f64, usize)>> {
    batch.validate(&params.config)?;
    (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let cache = forward_sample(
                params,
                &batch.tokens[b],
                &batch.pad_mask[b],
                batch.neighbors.items.get(b).map(Vec::as_slice),
            )?;
            let logits = cache.logits(params)?;
            let count = batch.loss_mask[b].iter().filter(|&&m| m).count();
            let (sum, _) = cross_entropy(&logits, &batch.targets[b], &batch.loss_mask[b], T::one());
            Ok((sum, count))
        })
        .collect()
}

/// Masked mean loss of each batch item taken alone (0 for items with no scored position).
pub fn per_sample_losses<T: Scalar>(params: &RetroParams<T>, batch: &Batch) -> Result<Vec<f64>> {
    Ok(per_sample_nll(params, batch)?
        .into_iter()
        .map(|(sum, count)| if count == 0 { 0.0 } else { sum / count as f64 })
        .collect())
}

/// Batch loss and its gradient with respect to every parameter.
///
/// Items are processed in parallel and their gradients summed in batch order,
/// so the result does not depend on the thread count.
pub fn loss_and_grad<T: Scalar>(params: &RetroParams<T>, batch: &Batch) -> Result<(f64, RetroParams<T>)> {
    batch.validate(&params.config)?;
    let count = batch.loss_mask.iter().flatten().filter(|&&m| m).count();
    let mut grads = params.zeros_like();
    if count == 0 {
        log::warn!("loss_and_grad: every position is masked, returning 0");
        return Ok((0.0, grads));
    }
    let scale = T::of(1.0 / count as f64);
    let per: Vec<(f64, RetroParams<T>)> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let cache = forward_sample(
                params,
                &batch.tokens[b],
                &batch.pad_mask[b],
                batch.neighbors.items.get(b).map(Vec::as_slice),
            )?;
            let logits = cache.logits(params)?;
            let (sum, dlogits) = cross_entropy(&logits, &batch.targets[b], &batch.loss_mask[b], scale);
            let mut g = params.zeros_like();
            backward_sample(params, &cache, &dlogits, &mut g)?;
            Ok((sum, g))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (sum, g) in per {
        total += sum;
        for (dst, (_, src)) in grads.tensors_mut().into_iter().zip(g.named_tensors()) {
            dst.add_assign(src)?;
        }
    }
    Ok((total / count as f64, grads))
}
