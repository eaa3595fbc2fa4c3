use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retro_core::eval::perplexity;
use retro_core::model::{
    forward, loss_and_grad, train_step, Batch, ModelConfig, NeighborSet, RetroParams, TrainHyper,
};
use retro_core::numerics::{AdamHyper, AdamState, Tensor};
use retro_core::tokenizer::{TokenId, PAD_ID};

type M = Vec<Vec<f64>>;

fn t2m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn lin(x: &M, w: &Tensor<f64>, b: &Tensor<f64>) -> M {
    let w = t2m(w);
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b.data()[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(x: &M, g: &Tensor<f64>, b: &Tensor<f64>, eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn attend(q: &M, k: &M, v: &M, allowed: impl Fn(usize, usize) -> bool) -> M {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
            let mut out = vec![0.0; v[0].len()];
            if keys.is_empty() {
                return out;
            }
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for (&j, sj) in keys.iter().zip(&s) {
                for (o, vv) in out.iter_mut().zip(&v[j]) {
                    *o += (sj - mx).exp() / z * vv;
                }
            }
            out
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attn_block(x: &M, norm: &retro_core::model::Norm<f64>, a: &retro_core::model::Attention<f64>, eps: f64, allowed: impl Fn(usize, usize) -> bool) -> M {
    let h = ln(x, &norm.gamma, &norm.beta, eps);
    let o = attend(&lin(&h, &a.q.w, &a.q.b), &lin(&h, &a.k.w, &a.k.b), &lin(&h, &a.v.w, &a.v.b), allowed);
    add(x, &lin(&o, &a.o.w, &a.o.b))
}

fn mlp_block(x: &M, norm: &retro_core::model::Norm<f64>, m: &retro_core::model::Mlp<f64>, eps: f64) -> M {
    let h = ln(x, &norm.gamma, &norm.beta, eps);
    let mut u = lin(&h, &m.fc.w, &m.fc.b);
    u.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    add(x, &lin(&u, &m.proj.w, &m.proj.b))
}

/// Straight-line evaluation of the 1-layer, 1-CCA model on one sequence of two chunks.
fn reference_logits(p: &RetroParams<f64>, tokens: &[TokenId], neighbors: &[Vec<TokenId>]) -> M {
    let c = &p.config;
    let eps = c.ln_eps;
    let enc = p.encoder.as_ref().unwrap();
    let mut keys: M = Vec::new();
    let mut key_ok = Vec::new();
    for nb in neighbors {
        let ok: Vec<bool> = nb.iter().map(|&t| t != PAD_ID).collect();
        let mut x: M = nb
            .iter()
            .enumerate()
            .map(|(i, &t)| enc.tok_emb.row(t as usize).iter().zip(enc.pos_emb.row(i)).map(|(a, b)| a + b).collect())
            .collect();
        for l in &enc.layers {
            x = attn_block(&x, &l.ln_attn, &l.attn, eps, |_, j| ok[j]);
            x = mlp_block(&x, &l.ln_mlp, &l.mlp, eps);
        }
        let mut y = ln(&x, &enc.ln_f.gamma, &enc.ln_f.beta, eps);
        for (row, &o) in y.iter_mut().zip(&ok) {
            if !o {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        keys.extend(y);
        key_ok.extend(ok);
    }
    let mut x: M = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| p.tok_emb.row(t as usize).iter().zip(p.pos_emb.row(i)).map(|(a, b)| a + b).collect())
        .collect();
    let layer = &p.layers[0];
    x = attn_block(&x, &layer.ln_attn, &layer.attn, eps, |i, j| j <= i);
    let cca = layer.cca.as_ref().unwrap();
    let m = c.chunk_size;
    let tail: M = x[m..].to_vec();
    let h = ln(&tail, &cca.norm.gamma, &cca.norm.beta, eps);
    let o = attend(
        &lin(&h, &cca.attn.q.w, &cca.attn.q.b),
        &lin(&keys, &cca.attn.k.w, &cca.attn.k.b),
        &lin(&keys, &cca.attn.v.w, &cca.attn.v.b),
        |_, j| key_ok[j],
    );
    let upd = lin(&o, &cca.attn.o.w, &cca.attn.o.b);
    for (r, u) in upd.iter().enumerate() {
        for (a, b) in x[m + r].iter_mut().zip(u) {
            *a += b;
        }
    }
    x = mlp_block(&x, &layer.ln_mlp, &layer.mlp, eps);
    let hf = ln(&x, &p.ln_f.gamma, &p.ln_f.beta, eps);
    let emb = t2m(&p.tok_emb);
    hf.iter()
        .map(|row| emb.iter().map(|e| e.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

#[test]
fn tiny_forward_matches_reference_evaluation() {
    let config = ModelConfig {
        n_layers: 1,
        hidden: 2,
        n_heads: 1,
        chunk_size: 2,
        k_neighbors: 2,
        cca_layers: vec![1],
        enc_layers: 1,
        max_seq: 4,
        init_std: 0.7,
        ..ModelConfig::default()
    };
    let mut params = RetroParams::<f64>::init(&config, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in retro_core::numerics::ParamTensors::tensors_mut(&mut params) {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let tokens = vec![72, 105, 33, 10];
    let neighbors = vec![vec![7, 8, 9, PAD_ID], vec![100, 101, 102, 103]];
    let set = NeighborSet::from_tokens(
        vec![vec![neighbors.clone(), vec![vec![PAD_ID; 4]; 2]]],
        2,
        4,
    );
    let logits = forward(&params, std::slice::from_ref(&tokens), &set, &[vec![false; 4]]).unwrap();
    let reference = reference_logits(&params, &tokens, &neighbors);
    for (t, row) in reference.iter().enumerate() {
        for (v, &r) in row.iter().enumerate() {
            let got = logits.data()[t * 257 + v];
            assert!((got - r).abs() < 1e-8, "t={t} v={v}: {got} vs {r}");
        }
    }
}

fn memorize_setup() -> (RetroParams<f32>, Batch, TrainHyper) {
    let config = ModelConfig {
        n_layers: 2,
        hidden: 32,
        n_heads: 2,
        chunk_size: 8,
        k_neighbors: 2,
        cca_layers: vec![2],
        enc_layers: 1,
        max_seq: 32,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let corpus: Vec<TokenId> = (0..256).map(|_| rng.gen_range(0..256)).collect();
    let windows: Vec<Vec<TokenId>> = (0..8)
        .map(|w| (0..33).map(|i| corpus[(w * 32 + i) % 256]).collect())
        .collect();
    let neighbors = NeighborSet::padded(8, 4, 2, 16);
    let batch = Batch::from_windows(&windows, neighbors).unwrap();
    let params = RetroParams::init(&config, 7).unwrap();
    let hyper = TrainHyper {
        adam: AdamHyper { lr: 1e-2, weight_decay: 0.0, ..AdamHyper::default() },
        warmup_steps: 10,
        decay_steps: 190,
        ..TrainHyper::default()
    };
    (params, batch, hyper)
}

#[test]
fn memorizes_a_short_corpus() {
    let (mut params, batch, hyper) = memorize_setup();
    let mut state = AdamState::new(&params);
    let initial = train_step(&mut params, &mut state, &batch, &hyper).unwrap().loss;
    for _ in 1..200 {
        train_step(&mut params, &mut state, &batch, &hyper).unwrap();
    }
    let (last, _) = loss_and_grad(&params, &batch).unwrap();
    assert!(last < 0.1 * initial, "initial {initial}, final {last}");
}

#[test]
fn memorized_corpus_has_near_unit_perplexity() {
    let (mut params, batch, hyper) = memorize_setup();
    let mut state = AdamState::new(&params);
    for _ in 0..200 {
        train_step(&mut params, &mut state, &batch, &hyper).unwrap();
    }
    let ppl = perplexity(&params, std::slice::from_ref(&batch)).unwrap();
    let (loss, _) = loss_and_grad(&params, &batch).unwrap();
    assert!((ppl - loss.exp()).abs() < 1e-4 * ppl);
    assert!(ppl < 1.05, "perplexity {ppl}");
}

#[test]
fn loss_trace_is_bitwise_reproducible() {
    let trace = || {
        let (mut params, batch, hyper) = memorize_setup();
        let mut state = AdamState::new(&params);
        (0..5)
            .map(|_| train_step(&mut params, &mut state, &batch, &hyper).unwrap().loss.to_bits())
            .collect::<Vec<u64>>()
    };
    assert_eq!(trace(), trace());
}
