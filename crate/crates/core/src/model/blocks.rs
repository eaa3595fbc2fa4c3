//! Residual sub-blocks with their saved activations and backward passes.

use crate::error::{Error, Result};
use crate::numerics::layers::{
    attention_backward, attention_forward, embedding_backward, embedding_forward, gelu, gelu_grad,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, AttentionCache, LayerNormCache,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, PAD_ID};

use super::params::{Attention, CrossAttention, EncoderLayer, Linear, Mlp, NeighborEncoder, Norm};

pub(crate) fn slice_rows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let c = t.cols();
    Tensor::new(&[end - start, c], t.data()[start * c..end * c].to_vec()).expect("row range in bounds")
}

pub(crate) fn add_rows<T: Scalar>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let c = src.cols();
    for (d, &s) in dst.data_mut()[start * c..(start + src.rows()) * c].iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn concat_rows<T: Scalar>(parts: &[Tensor<T>], cols: usize) -> Tensor<T> {
    let rows = parts.iter().map(Tensor::rows).sum::<usize>();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[rows, cols], data).expect("parts share width")
}

fn linear_bwd<T: Scalar>(x: &Tensor<T>, p: &Linear<T>, g: &mut Linear<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    linear_backward(x, &p.w, dy, &mut g.w, &mut g.b)
}

fn norm_fwd<T: Scalar>(x: &Tensor<T>, n: &Norm<T>, eps: T) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    layer_norm_forward(x, &n.gamma, &n.beta, eps)
}

fn norm_bwd<T: Scalar>(dy: &Tensor<T>, c: &LayerNormCache<T>, n: &Norm<T>, g: &mut Norm<T>) -> Result<Tensor<T>> {
    layer_norm_backward(dy, c, &n.gamma, &mut g.gamma, &mut g.beta)
}

#[derive(Clone, Debug)]
pub(crate) struct SelfAttnCache<T> {
    ln: LayerNormCache<T>,
    a: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: AttentionCache<T>,
    o: Tensor<T>,
}

/// `x + Attn(LN(x))` with the key mask given by `allowed`.
pub(crate) fn self_attn_forward<T: Scalar>(
    x: &Tensor<T>,
    ln: &Norm<T>,
    p: &Attention<T>,
    heads: usize,
    eps: T,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<(Tensor<T>, SelfAttnCache<T>)> {
    let (a, ln_cache) = norm_fwd(x, ln, eps)?;
    let q = linear_forward(&a, &p.q.w, &p.q.b)?;
    let k = linear_forward(&a, &p.k.w, &p.k.b)?;
    let v = linear_forward(&a, &p.v.w, &p.v.b)?;
    let (o, attn) = attention_forward(&q, &k, &v, heads, allowed)?;
    let mut y = linear_forward(&o, &p.o.w, &p.o.b)?;
    y.add_assign(x)?;
    Ok((
        y,
        SelfAttnCache {
            ln: ln_cache,
            a,
            q,
            k,
            v,
            attn,
            o,
        },
    ))
}

pub(crate) fn self_attn_backward<T: Scalar>(
    dy: &Tensor<T>,
    c: &SelfAttnCache<T>,
    ln: &Norm<T>,
    p: &Attention<T>,
    gln: &mut Norm<T>,
    gp: &mut Attention<T>,
) -> Result<Tensor<T>> {
    let d_o = linear_bwd(&c.o, &p.o, &mut gp.o, dy)?;
    let (dq, dk, dv) = attention_backward(&d_o, &c.q, &c.k, &c.v, &c.attn)?;
    let mut da = linear_bwd(&c.a, &p.q, &mut gp.q, &dq)?;
    da.add_assign(&linear_bwd(&c.a, &p.k, &mut gp.k, &dk)?)?;
    da.add_assign(&linear_bwd(&c.a, &p.v, &mut gp.v, &dv)?)?;
    let mut dx = norm_bwd(&da, &c.ln, ln, gln)?;
    dx.add_assign(dy)?;
    Ok(dx)
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache<T> {
    ln: LayerNormCache<T>,
    a: Tensor<T>,
    h: Tensor<T>,
    g: Tensor<T>,
}

/// `x + Proj(GeLU(Fc(LN(x))))`.
pub(crate) fn mlp_forward<T: Scalar>(
    x: &Tensor<T>,
    ln: &Norm<T>,
    p: &Mlp<T>,
    eps: T,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    let (a, ln_cache) = norm_fwd(x, ln, eps)?;
    let h = linear_forward(&a, &p.fc.w, &p.fc.b)?;
    let g = h.map(gelu);
    let mut y = linear_forward(&g, &p.proj.w, &p.proj.b)?;
    y.add_assign(x)?;
    Ok((y, MlpCache { ln: ln_cache, a, h, g }))
}

pub(crate) fn mlp_backward<T: Scalar>(
    dy: &Tensor<T>,
    c: &MlpCache<T>,
    ln: &Norm<T>,
    p: &Mlp<T>,
    gln: &mut Norm<T>,
    gp: &mut Mlp<T>,
) -> Result<Tensor<T>> {
    let mut dg = linear_bwd(&c.g, &p.proj, &mut gp.proj, dy)?;
    for (d, &h) in dg.data_mut().iter_mut().zip(c.h.data()) {
        *d *= gelu_grad(h);
    }
    let da = linear_bwd(&c.a, &p.fc, &mut gp.fc, &dg)?;
    let mut dx = norm_bwd(&da, &c.ln, ln, gln)?;
    dx.add_assign(dy)?;
    Ok(dx)
}

/// Encoded neighbors retrieved with one chunk: `k` sequences stacked row-wise,
/// with the validity of every row as an attention key.
#[derive(Clone, Debug)]
pub struct EncodedSlot<T> {
    pub states: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> EncodedSlot<T> {
    pub fn empty(hidden: usize) -> Self {
        Self {
            states: Tensor::zeros(&[0, hidden]),
            valid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
struct CcaChunk<T> {
    k: Tensor<T>,
    v: Tensor<T>,
    attn: AttentionCache<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct CcaCache<T> {
    ln: Option<LayerNormCache<T>>,
    a: Tensor<T>,
    q: Tensor<T>,
    chunks: Vec<CcaChunk<T>>,
    o: Tensor<T>,
    active: Vec<bool>,
}

/// Chunked cross-attention over a single sequence `x: [n × hidden]`.
///
/// Rows of chunk `i >= 1` attend to `slots[i - 1]`; chunk 0 is passed through.
/// Rows whose slot has no valid key receive no update.
pub(crate) fn cca_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &CrossAttention<T>,
    slots: &[EncodedSlot<T>],
    m: usize,
    heads: usize,
    eps: T,
) -> Result<(Tensor<T>, CcaCache<T>)> {
    let (n, h) = (x.rows(), x.cols());
    if m == 0 || n % m != 0 {
        return Err(Error::Alignment(format!("sequence length {n} is not a multiple of chunk size {m}")));
    }
    let l = n / m;
    if slots.len() + 1 < l {
        return Err(Error::Shape(format!("{} neighbor slots for {l} chunks", slots.len())));
    }
    let mut y = x.clone();
    if l < 2 {
        let empty = Tensor::zeros(&[0, h]);
        let cache = CcaCache {
            ln: None,
            a: empty.clone(),
            q: empty.clone(),
            chunks: Vec::new(),
            o: empty,
            active: Vec::new(),
        };
        return Ok((y, cache));
    }
    let tail = slice_rows(x, m, n);
    let (a, ln_cache) = norm_fwd(&tail, &p.norm, eps)?;
    let q = linear_forward(&a, &p.attn.q.w, &p.attn.q.b)?;
    let mut o = Tensor::zeros(&[n - m, h]);
    let mut chunks = Vec::with_capacity(l - 1);
    let mut active = vec![false; n - m];
    for i in 1..l {
        let slot = &slots[i - 1];
        if slot.states.rows() != slot.valid.len() || (slot.states.rows() > 0 && slot.states.cols() != h) {
            return Err(Error::Shape(format!("neighbor slot {} has shape {:?}", i - 1, slot.states.shape())));
        }
        let k = linear_forward(&slot.states, &p.attn.k.w, &p.attn.k.b)?;
        let v = linear_forward(&slot.states, &p.attn.v.w, &p.attn.v.b)?;
        let qi = slice_rows(&q, (i - 1) * m, i * m);
        let (oi, attn) = attention_forward(&qi, &k, &v, heads, |_, j| slot.valid[j])?;
        add_rows(&mut o, (i - 1) * m, &oi);
        let any = slot.valid.iter().any(|&b| b);
        active[(i - 1) * m..i * m].iter_mut().for_each(|a| *a = any);
        chunks.push(CcaChunk { k, v, attn });
    }
    let proj = linear_forward(&o, &p.attn.o.w, &p.attn.o.b)?;
    for (r, &act) in active.iter().enumerate() {
        if act {
            for (d, &s) in y.row_mut(m + r).iter_mut().zip(proj.row(r)) {
                *d += s;
            }
        }
    }
    let cache = CcaCache {
        ln: Some(ln_cache),
        a,
        q,
        chunks,
        o,
        active,
    };
    Ok((y, cache))
}

/// Returns `dx` and accumulates slot-state gradients into `dslots`.
pub(crate) fn cca_backward<T: Scalar>(
    dy: &Tensor<T>,
    c: &CcaCache<T>,
    p: &CrossAttention<T>,
    g: &mut CrossAttention<T>,
    slots: &[EncodedSlot<T>],
    dslots: &mut [Tensor<T>],
    m: usize,
) -> Result<Tensor<T>> {
    let mut dx = dy.clone();
    let Some(ln_cache) = &c.ln else {
        return Ok(dx);
    };
    let n = dy.rows();
    let mut dproj = slice_rows(dy, m, n);
    for (r, &act) in c.active.iter().enumerate() {
        if !act {
            dproj.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let d_o = linear_bwd(&c.o, &p.attn.o, &mut g.attn.o, &dproj)?;
    let mut dq = Tensor::zeros(c.q.shape());
    for (idx, ch) in c.chunks.iter().enumerate() {
        let i = idx + 1;
        if !c.active[(i - 1) * m] {
            continue;
        }
        let doi = slice_rows(&d_o, (i - 1) * m, i * m);
        let qi = slice_rows(&c.q, (i - 1) * m, i * m);
        let (dqi, dk, dv) = attention_backward(&doi, &qi, &ch.k, &ch.v, &ch.attn)?;
        add_rows(&mut dq, (i - 1) * m, &dqi);
        let states = &slots[i - 1].states;
        let mut ds = linear_bwd(states, &p.attn.k, &mut g.attn.k, &dk)?;
        ds.add_assign(&linear_bwd(states, &p.attn.v, &mut g.attn.v, &dv)?)?;
        dslots[i - 1].add_assign(&ds)?;
    }
    let da = linear_bwd(&c.a, &p.attn.q, &mut g.attn.q, &dq)?;
    let dtail = norm_bwd(&da, ln_cache, &p.norm, &mut g.norm)?;
    add_rows(&mut dx, m, &dtail);
    Ok(dx)
}

#[derive(Clone, Debug)]
struct EncoderLayerCache<T> {
    attn: SelfAttnCache<T>,
    mlp: MlpCache<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderCache<T> {
    ids: Vec<usize>,
    valid: Vec<bool>,
    layers: Vec<EncoderLayerCache<T>>,
    ln_f: LayerNormCache<T>,
}

/// Bidirectional encoding of one neighbor sequence. Pad tokens are masked out
/// as keys and their output rows are zero.
pub(crate) fn encode_sequence<T: Scalar>(
    enc: &NeighborEncoder<T>,
    tokens: &[TokenId],
    heads: usize,
    eps: T,
) -> Result<(Tensor<T>, Vec<bool>, EncoderCache<T>)> {
    let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
    encode_sequence_masked(enc, tokens, valid, heads, eps)
}

/// As [`encode_sequence`] with an explicit key/output mask.
pub(crate) fn encode_sequence_masked<T: Scalar>(
    enc: &NeighborEncoder<T>,
    tokens: &[TokenId],
    valid: Vec<bool>,
    heads: usize,
    eps: T,
) -> Result<(Tensor<T>, Vec<bool>, EncoderCache<T>)> {
    let len = tokens.len();
    if valid.len() != len {
        return Err(Error::Shape(format!("{} mask flags for {len} tokens", valid.len())));
    }
    if len > enc.pos_emb.rows() {
        return Err(Error::Length(format!(
            "neighbor of {len} tokens exceeds encoder length {}",
            enc.pos_emb.rows()
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = embedding_forward(&enc.tok_emb, &ids)?;
    x.add_assign(&slice_rows(&enc.pos_emb, 0, len))?;
    let mut layers = Vec::with_capacity(enc.layers.len());
    for l in &enc.layers {
        let (x1, attn) = self_attn_forward(&x, &l.ln_attn, &l.attn, heads, eps, |_, j| valid[j])?;
        let (x2, mlp) = mlp_forward(&x1, &l.ln_mlp, &l.mlp, eps)?;
        x = x2;
        layers.push(EncoderLayerCache { attn, mlp });
    }
    let (mut y, ln_f) = norm_fwd(&x, &enc.ln_f, eps)?;
    for (r, &ok) in valid.iter().enumerate() {
        if !ok {
            y.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let cache = EncoderCache {
        ids,
        valid: valid.clone(),
        layers,
        ln_f,
    };
    Ok((y, valid, cache))
}

pub(crate) fn encode_sequence_backward<T: Scalar>(
    dy: &Tensor<T>,
    c: &EncoderCache<T>,
    enc: &NeighborEncoder<T>,
    g: &mut NeighborEncoder<T>,
) -> Result<()> {
    let mut dy = dy.clone();
    for (r, &ok) in c.valid.iter().enumerate() {
        if !ok {
            dy.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let mut dx = norm_bwd(&dy, &c.ln_f, &enc.ln_f, &mut g.ln_f)?;
    for ((lc, p), gl) in c.layers.iter().zip(&enc.layers).zip(&mut g.layers).rev() {
        let EncoderLayer { ln_attn, attn, ln_mlp, mlp } = gl;
        dx = mlp_backward(&dx, &lc.mlp, &p.ln_mlp, &p.mlp, ln_mlp, mlp)?;
        dx = self_attn_backward(&dx, &lc.attn, &p.ln_attn, &p.attn, ln_attn, attn)?;
    }
    embedding_backward(&dx, &c.ids, &mut g.tok_emb);
    add_rows(&mut g.pos_emb, 0, &dx);
    Ok(())
}

/// Encodes the `k` neighbors of one slot and stacks them.
pub(crate) fn encode_slot<T: Scalar>(
    enc: &NeighborEncoder<T>,
    neighbors: &[&[TokenId]],
    hidden: usize,
    heads: usize,
    eps: T,
) -> Result<(EncodedSlot<T>, Vec<EncoderCache<T>>)> {
    let mut parts = Vec::with_capacity(neighbors.len());
    let mut valid = Vec::new();
    let mut caches = Vec::with_capacity(neighbors.len());
    for toks in neighbors {
        let (y, v, c) = encode_sequence(enc, toks, heads, eps)?;
        parts.push(y);
        valid.extend(v);
        caches.push(c);
    }
    let states = concat_rows(&parts, hidden);
    Ok((EncodedSlot { states, valid }, caches))
}

pub(crate) fn encode_slot_backward<T: Scalar>(
    dstates: &Tensor<T>,
    caches: &[EncoderCache<T>],
    enc: &NeighborEncoder<T>,
    g: &mut NeighborEncoder<T>,
) -> Result<()> {
    let mut start = 0;
    for c in caches {
        let len = c.valid.len();
        let d = slice_rows(dstates, start, start + len);
        encode_sequence_backward(&d, c, enc, g)?;
        start += len;
    }
    Ok(())
}
