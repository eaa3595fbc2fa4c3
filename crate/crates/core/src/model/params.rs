use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ParamTensors, Tensor};
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

/// Chunked cross-attention sub-block: pre-norm then attention over neighbor states.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T> {
    pub norm: Norm<T>,
    pub attn: Attention<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln_attn: Norm<T>,
    pub attn: Attention<T>,
    pub cca: Option<CrossAttention<T>>,
    pub ln_mlp: Norm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln_attn: Norm<T>,
    pub attn: Attention<T>,
    pub ln_mlp: Norm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborEncoder<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub ln_f: Norm<T>,
}

/// All trainable weights. The output projection is tied to `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetroParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub ln_f: Norm<T>,
    /// Absent in the GPT ablation.
    pub encoder: Option<NeighborEncoder<T>>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("shape product matches data")
    }

    fn linear<T: Scalar>(&mut self, i: usize, o: usize) -> Linear<T> {
        Linear {
            w: self.weight(&[i, o]),
            b: Tensor::zeros(&[o]),
        }
    }

    fn attention<T: Scalar>(&mut self, h: usize) -> Attention<T> {
        Attention {
            q: self.linear(h, h),
            k: self.linear(h, h),
            v: self.linear(h, h),
            o: self.linear(h, h),
        }
    }

    fn mlp<T: Scalar>(&mut self, h: usize, ratio: usize) -> Mlp<T> {
        Mlp {
            fc: self.linear(h, ratio * h),
            proj: self.linear(ratio * h, h),
        }
    }
}

fn norm<T: Scalar>(h: usize) -> Norm<T> {
    Norm {
        gamma: Tensor::full(&[h], T::one()),
        beta: Tensor::zeros(&[h]),
    }
}

impl<T: Scalar> RetroParams<T> {
    /// Gaussian initialization with `init_std`, unit norms, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std {}: {e}", config.init_std)))?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let h = config.hidden;
        let tok_emb = init.weight(&[config.vocab, h]);
        let pos_emb = init.weight(&[config.max_seq, h]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn = init.attention(h);
            let cca = config.has_cca(l).then(|| CrossAttention {
                norm: norm(h),
                attn: init.attention(h),
            });
            layers.push(DecoderLayer {
                ln_attn: norm(h),
                attn,
                cca,
                ln_mlp: norm(h),
                mlp: init.mlp(h, config.mlp_ratio),
            });
        }
        let encoder = if config.is_gpt() {
            None
        } else {
            let tok_emb = init.weight(&[config.vocab, h]);
            let pos_emb = init.weight(&[config.neighbor_len(), h]);
            let layers = (0..config.enc_layers)
                .map(|_| EncoderLayer {
                    ln_attn: norm(h),
                    attn: init.attention(h),
                    ln_mlp: norm(h),
                    mlp: init.mlp(h, config.mlp_ratio),
                })
                .collect();
            Some(NeighborEncoder {
                tok_emb,
                pos_emb,
                layers,
                ln_f: norm(h),
            })
        };
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            ln_f: norm(h),
            encoder,
        })
    }

    pub fn cast<U: Scalar>(&self) -> RetroParams<U> {
        let mut out = RetroParams::<U>::init(&self.config, 0).expect("config already validated");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn push<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, name: String, t: &'a Tensor<T>) {
    out.push((name, t));
}

fn visit_linear<'a, T>(p: &str, l: &'a Linear<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    push(out, format!("{p}.w"), &l.w);
    push(out, format!("{p}.b"), &l.b);
}

fn visit_norm<'a, T>(p: &str, n: &'a Norm<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    push(out, format!("{p}.gamma"), &n.gamma);
    push(out, format!("{p}.beta"), &n.beta);
}

fn visit_attention<'a, T>(p: &str, a: &'a Attention<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    visit_linear(&format!("{p}.q"), &a.q, out);
    visit_linear(&format!("{p}.k"), &a.k, out);
    visit_linear(&format!("{p}.v"), &a.v, out);
    visit_linear(&format!("{p}.o"), &a.o, out);
}

fn visit_mlp<'a, T>(p: &str, m: &'a Mlp<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    visit_linear(&format!("{p}.fc"), &m.fc, out);
    visit_linear(&format!("{p}.proj"), &m.proj, out);
}

fn linear_mut<T>(l: &mut Linear<T>) -> [&mut Tensor<T>; 2] {
    [&mut l.w, &mut l.b]
}

fn norm_mut<T>(n: &mut Norm<T>) -> [&mut Tensor<T>; 2] {
    [&mut n.gamma, &mut n.beta]
}

fn attention_mut<'a, T>(a: &'a mut Attention<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    out.extend(linear_mut(&mut a.q));
    out.extend(linear_mut(&mut a.k));
    out.extend(linear_mut(&mut a.v));
    out.extend(linear_mut(&mut a.o));
}

fn mlp_mut<'a, T>(m: &'a mut Mlp<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    out.extend(linear_mut(&mut m.fc));
    out.extend(linear_mut(&mut m.proj));
}

impl<T: Scalar> ParamTensors<T> for RetroParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        push(&mut out, "tok_emb".into(), &self.tok_emb);
        push(&mut out, "pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            visit_norm(&format!("{p}.ln_attn"), &l.ln_attn, &mut out);
            visit_attention(&format!("{p}.attn"), &l.attn, &mut out);
            if let Some(c) = &l.cca {
                visit_norm(&format!("{p}.cca.norm"), &c.norm, &mut out);
                visit_attention(&format!("{p}.cca.attn"), &c.attn, &mut out);
            }
            visit_norm(&format!("{p}.ln_mlp"), &l.ln_mlp, &mut out);
            visit_mlp(&format!("{p}.mlp"), &l.mlp, &mut out);
        }
        visit_norm("ln_f", &self.ln_f, &mut out);
        if let Some(e) = &self.encoder {
            push(&mut out, "encoder.tok_emb".into(), &e.tok_emb);
            push(&mut out, "encoder.pos_emb".into(), &e.pos_emb);
            for (i, l) in e.layers.iter().enumerate() {
                let p = format!("encoder.layers.{i}");
                visit_norm(&format!("{p}.ln_attn"), &l.ln_attn, &mut out);
                visit_attention(&format!("{p}.attn"), &l.attn, &mut out);
                visit_norm(&format!("{p}.ln_mlp"), &l.ln_mlp, &mut out);
                visit_mlp(&format!("{p}.mlp"), &l.mlp, &mut out);
            }
            visit_norm("encoder.ln_f", &e.ln_f, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(norm_mut(&mut l.ln_attn));
            attention_mut(&mut l.attn, &mut out);
            if let Some(c) = &mut l.cca {
                out.extend(norm_mut(&mut c.norm));
                attention_mut(&mut c.attn, &mut out);
            }
            out.extend(norm_mut(&mut l.ln_mlp));
            mlp_mut(&mut l.mlp, &mut out);
        }
        out.extend(norm_mut(&mut self.ln_f));
        if let Some(e) = &mut self.encoder {
            out.push(&mut e.tok_emb);
            out.push(&mut e.pos_emb);
            for l in &mut e.layers {
                out.extend(norm_mut(&mut l.ln_attn));
                attention_mut(&mut l.attn, &mut out);
                out.extend(norm_mut(&mut l.ln_mlp));
                mlp_mut(&mut l.mlp, &mut out);
            }
            out.extend(norm_mut(&mut e.ln_f));
        }
        out
    }
}
