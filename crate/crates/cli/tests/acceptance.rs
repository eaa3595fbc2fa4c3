//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p retro-cli --test acceptance -- 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use retro_core::ann::{brute_force_search, AnnIndex, IndexConfig, QueryParams};
use retro_core::data::{lm_windows, window_batch};
use retro_core::datastore::{Datastore, DatastoreConfig};
use retro_core::eval::{exact_match, is_repetitive, perplexity, zipf_coefficient};
use retro_core::generation::{
    batch_pad_qa, left_pad, ExactRetriever, FixedNeighbors, GenerationSession, NeighborSource, QaSample,
    SamplingParams,
};
use retro_core::model::{
    forward, lm_loss, loss_and_grad, per_sample_losses, train_step, Batch, ModelConfig, Neighbor, NeighborSet,
    RetroParams, TrainHyper,
};
use retro_core::numerics::{grad_check, AdamHyper, AdamState, Tensor};
use retro_core::tokenizer::{TokenId, PAD_ID};
use retro_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, lo: u32, hi: u32) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random neighbors with a random pad tail in each.
fn neighbors(rng: &mut ChaCha8Rng, c: &ModelConfig, batch: usize, chunks: usize) -> NeighborSet {
    let items = (0..batch)
        .map(|_| {
            (0..chunks)
                .map(|_| {
                    (0..c.k_neighbors)
                        .map(|_| {
                            let mut t = tokens(rng, c.neighbor_len(), 0, 256);
                            let cut = rng.gen_range(1..=t.len());
                            t[cut..].iter_mut().for_each(|v| *v = PAD_ID);
                            t
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    NeighborSet::from_tokens(items, c.k_neighbors, c.neighbor_len())
}

fn tiny_retro(max_seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden: 8,
        n_heads: 2,
        chunk_size: 4,
        k_neighbors: 2,
        cca_layers: vec![2],
        enc_layers: 1,
        max_seq,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let c = tiny_retro(8);
    let params = RetroParams::<f64>::init(&c, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let windows: Vec<Vec<TokenId>> = (0..2).map(|_| tokens(&mut rng, 9, 0, 256)).collect();
    let mut batch = Batch::from_windows(&windows, neighbors(&mut rng, &c, 2, 2)).unwrap();
    batch.pad_mask[1][0] = true;
    batch.loss_mask[1][0] = false;
    let (_, grads) = loss_and_grad(&params, &batch).unwrap();
    let t0 = Instant::now();
    let report = grad_check(&params, &grads, |p| loss_and_grad(p, &batch).map(|r| r.0), |_| false, 1e-4).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "max relative error {:.2e} over {} tensors (limit 1e-4), {secs:.1} s (limit 60 s)",
            report.max_rel_error,
            report.entries.len()
        ),
    )
}

fn row(l: &Tensor<f64>, t: usize) -> &[f64] {
    let v = l.shape()[2];
    &l.data()[t * v..(t + 1) * v]
}

fn criterion_2() -> Outcome {
    let c = ModelConfig {
        cca_layers: vec![1, 2],
        ..tiny_retro(16)
    };
    let m = c.chunk_size;
    let n = c.max_seq;
    let params = RetroParams::<f64>::init(&c, 2).unwrap();
    let gpt = RetroParams::<f64>::init(&c.gpt_ablation(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pad = vec![vec![false; n]];
    let (mut causal, mut first, mut ablation) = (0, 0, 0);
    let trials = 100;
    for _ in 0..trials {
        let toks = vec![tokens(&mut rng, n, 0, 256)];
        let nb = neighbors(&mut rng, &c, 1, n / m);
        let base = forward(&params, &toks, &nb, &pad).unwrap();

        let t = rng.gen_range(0..n);
        let mut toks2 = toks.clone();
        toks2[0][t + 1..].iter_mut().for_each(|v| *v = rng.gen_range(0..256));
        let mut nb2 = nb.clone();
        let fresh = neighbors(&mut rng, &c, 1, n / m);
        for j in t / m..n / m {
            nb2.items[0][j] = fresh.items[0][j].clone();
        }
        let changed = forward(&params, &toks2, &nb2, &pad).unwrap();
        causal += usize::from((0..=t).all(|s| row(&base, s) == row(&changed, s)));

        let other = forward(&params, &toks, &fresh, &pad).unwrap();
        first += usize::from((0..m).all(|s| row(&base, s) == row(&other, s)));

        let g1 = forward(&gpt, &toks, &nb, &pad).unwrap();
        let g2 = forward(&gpt, &toks, &fresh, &pad).unwrap();
        ablation += usize::from(g1.data() == g2.data());
    }
    outcome(
        causal == trials && first == trials && ablation == trials,
        format!(
            "bitwise-equal trials: future perturbation {causal}/{trials}, first chunk {first}/{trials}, GPT ablation {ablation}/{trials}"
        ),
    )
}

/// Validation loss of a model trained on the copy corpus.
fn copy_task_loss(config: &ModelConfig, train: &[Batch], val: &[Batch], steps: u64) -> f64 {
    let mut params = RetroParams::<f32>::init(config, 3).unwrap();
    let mut state = AdamState::new(&params);
    let hyper = TrainHyper {
        adam: AdamHyper {
            lr: 3e-3,
            ..AdamHyper::default()
        },
        warmup_steps: 50,
        decay_steps: steps,
        ..TrainHyper::default()
    };
    for s in 0..steps {
        train_step(&mut params, &mut state, &train[s as usize % train.len()], &hyper).unwrap();
    }
    perplexity(&params, val).unwrap().ln()
}

fn criterion_3() -> Outcome {
    let (m, n, steps) = (8, 32, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let docs: Vec<(String, Vec<TokenId>)> = (0..320)
        .map(|i| (format!("doc{i}"), tokens(&mut rng, n + 1, 97, 113)))
        .collect();
    let ds = Datastore::from_documents(
        &docs,
        &DatastoreConfig {
            chunk_size: m,
            embed_dim: 32,
            hash_seed: 0,
        },
    )
    .unwrap();
    let source = ExactRetriever { datastore: &ds };
    let retro = ModelConfig {
        n_layers: 2,
        hidden: 32,
        n_heads: 2,
        chunk_size: m,
        k_neighbors: 1,
        cca_layers: vec![2],
        enc_layers: 1,
        max_seq: n,
        ..ModelConfig::default()
    };
    let batches = |config: &ModelConfig, range: std::ops::Range<usize>| -> Vec<Batch> {
        let windows: Vec<_> = docs[range].iter().flat_map(|d| lm_windows(&d.1, n)).collect();
        windows
            .chunks(8)
            .map(|w| window_batch(w, config, Some(&source)).unwrap())
            .collect()
    };
    let mut losses = Vec::new();
    for config in [retro.clone(), retro.gpt_ablation()] {
        losses.push(copy_task_loss(&config, &batches(&config, 0..256), &batches(&config, 256..320), steps));
    }
    let ratio = losses[0] / losses[1];
    outcome(
        ratio <= 0.8,
        format!(
            "validation loss RETRO {:.4} vs GPT {:.4}, ratio {ratio:.3} (limit 0.8), {steps} steps each",
            losses[0], losses[1]
        ),
    )
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

fn recall_at_10(index: &AnnIndex, truth: &[Vec<u64>], queries: &[f32], params: QueryParams<'_>) -> f64 {
    let mut hits = 0;
    for (q, t) in queries.chunks(64).zip(truth) {
        let got = index.search(q, &params).unwrap();
        hits += got.hits.iter().filter(|h| t.contains(&h.0)).count();
    }
    hits as f64 / (10 * truth.len()) as f64
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let (n, dim) = (50_000, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = unit_vectors(&mut rng, n, dim);
    let queries = unit_vectors(&mut rng, 200, dim);
    let config = IndexConfig {
        ncentroids: 256,
        m_sub: 8,
        bits_per_code: 8,
        nprobe_default: 16,
        rerank_r: 128,
        store_vectors: true,
        ..IndexConfig::default()
    };
    let mut index = AnnIndex::train(&data, dim, &config).unwrap();
    index.add(&data, &(0..n as u64).collect::<Vec<_>>()).unwrap();
    let truth: Vec<Vec<u64>> = queries
        .chunks(dim)
        .map(|q| brute_force_search(&data, dim, q, 10).unwrap().iter().map(|h| h.0).collect())
        .collect();

    let recall = recall_at_10(&index, &truth, &queries, QueryParams::k(10).with_nprobe(16).with_rerank(128));
    let sweep: Vec<f64> = [1, 2, 4, 8, 16, 32, 64, 128, 256]
        .iter()
        .map(|&p| recall_at_10(&index, &truth, &queries, QueryParams::k(10).with_nprobe(p).with_rerank(128)))
        .collect();
    let monotone = sweep.windows(2).all(|w| w[1] >= w[0]);
    let exact = queries.chunks(dim).zip(&truth).all(|(q, t)| {
        let got = index.search(q, &QueryParams::k(10).with_nprobe(256).with_rerank(n)).unwrap();
        got.hits.iter().map(|h| h.0).collect::<Vec<_>>() == *t
    });
    let secs = t0.elapsed().as_secs_f64();
    let sweep_text: Vec<String> = sweep.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        recall >= 0.7 && monotone && exact && secs < 300.0,
        format!(
            "recall@10 {recall:.3} at nprobe 16 (limit 0.7); nprobe sweep [{}] monotone {monotone}; full probe and re-rank equals brute force {exact}; {secs:.0} s (limit 300 s)",
            sweep_text.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let (n, dim, batch) = (1_000_000usize, 64, 65_536usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = IndexConfig {
        ncentroids: 256,
        m_sub: 8,
        bits_per_code: 8,
        nprobe_default: 16,
        rerank_r: 0,
        store_vectors: false,
        ..IndexConfig::default()
    };
    let first = unit_vectors(&mut rng, batch, dim);
    let mut index = AnnIndex::train(&first, dim, &config).unwrap();
    let mut added = 0usize;
    let mut block = first;
    while added < n {
        let rows = block.len() / dim;
        index.add(&block, &(added as u64..(added + rows) as u64).collect::<Vec<_>>()).unwrap();
        added += rows;
        block = unit_vectors(&mut rng, batch.min(n - added), dim);
    }
    let queries = unit_vectors(&mut rng, 200, dim);
    let before = index.probe_count();
    let mut max_lists = 0;
    let mut max_scanned = 0;
    let mut times: Vec<Duration> = Vec::with_capacity(200);
    for q in queries.chunks(dim) {
        let t = Instant::now();
        let r = index.search(q, &QueryParams::k(10).with_nprobe(16)).unwrap();
        times.push(t.elapsed());
        max_lists = max_lists.max(r.lists_probed);
        max_scanned = max_scanned.max(r.codes_scanned);
    }
    let per_query = (index.probe_count() - before) as f64 / 200.0;
    times.sort();
    let median_ms = times[times.len() / 2].as_secs_f64() * 1e3;
    outcome(
        index.len() == n && max_lists <= 16 && per_query <= 16.0 && median_ms < 5.0,
        format!(
            "{} vectors; lists probed per query max {max_lists} (counter mean {per_query:.1}) of 256, at most {max_scanned} codes scanned; median latency {median_ms:.2} ms (limit 5 ms)",
            index.len()
        ),
    )
}

/// Counts retrieval calls.
struct Counting {
    inner: FixedNeighbors,
    calls: std::sync::atomic::AtomicUsize,
}

impl NeighborSource for Counting {
    fn retrieve(&self, chunk: &[TokenId], k: usize) -> Result<Vec<Neighbor>> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.retrieve(chunk, k)
    }
}

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut formula = true;
    for m in [4usize, 64] {
        for n in 0..=4 * m {
            let t: Vec<TokenId> = (0..n as u32).map(|i| i % 256).collect();
            let (out, pads) = left_pad(&t, m);
            formula &= pads == (m - n % m) % m && out.len() % m == 0 && out[pads..] == t[..] && pads < m;
        }
    }
    pass &= formula;
    notes.push(format!("left_pad formula {formula}"));

    let c = ModelConfig {
        cca_layers: vec![1, 2],
        ..tiny_retro(32)
    };
    let m = c.chunk_size;
    let params = RetroParams::<f64>::init(&c, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<QaSample> = [(3, 2), (9, 5), (4, 1), (13, 7)]
        .iter()
        .map(|&(ctx, ans)| QaSample {
            context: tokens(&mut rng, ctx, 0, 256),
            answer: tokens(&mut rng, ans, 0, 256),
        })
        .collect();
    let evidence: Vec<Vec<Neighbor>> = (0..samples.len())
        .map(|_| {
            (0..c.k_neighbors)
                .map(|_| Neighbor::from_tokens(tokens(&mut rng, c.neighbor_len(), 0, 256)))
                .collect()
        })
        .collect();
    let qa_batch = |rows: &[usize]| -> Batch {
        let chosen: Vec<QaSample> = rows.iter().map(|&r| samples[r].clone()).collect();
        let padded = batch_pad_qa(&chosen, m, c.max_seq).unwrap();
        let items = rows.iter().map(|&r| vec![evidence[r].clone(); padded.chunks]).collect();
        padded.into_batch(NeighborSet {
            k: c.k_neighbors,
            neighbor_len: c.neighbor_len(),
            items,
        })
    };
    let together = per_sample_losses(&params, &qa_batch(&[0, 1, 2, 3])).unwrap();
    let worst = (0..samples.len())
        .map(|i| (per_sample_losses(&params, &qa_batch(&[i])).unwrap()[0] - together[i]).abs())
        .fold(0.0f64, f64::max);
    pass &= worst < 1e-6;
    notes.push(format!("batched QA loss max deviation {worst:.1e} (limit 1e-6)"));

    let fixed: Vec<Neighbor> = (0..c.k_neighbors)
        .map(|_| Neighbor::from_tokens(tokens(&mut rng, c.neighbor_len(), 0, 256)))
        .collect();
    let prompts: Vec<Vec<TokenId>> = [1, 6, 8, 11].iter().map(|&l| tokens(&mut rng, l, 97, 123)).collect();
    let max_tokens = 40;
    let mut identical = true;
    let mut counts_ok = true;
    for p in &prompts {
        let mut reference = None;
        for s in [1, 2, m] {
            let source = Counting {
                inner: FixedNeighbors(fixed.clone()),
                calls: Default::default(),
            };
            let mut session = GenerationSession::new(&params, &source, s).unwrap();
            let out = session.generate(p, &SamplingParams::greedy(max_tokens)).unwrap();
            let steps = out.len() + usize::from(out.len() < max_tokens);
            counts_ok &= session.refresh_queries() == steps.div_ceil(s)
                && source.calls.load(std::sync::atomic::Ordering::Relaxed)
                    == session.refresh_queries() + session.prefill_queries();
            match &reference {
                None => reference = Some(out),
                Some(r) => identical &= *r == out,
            }
        }
    }
    pass &= identical && counts_ok;
    notes.push(format!("greedy output identical for s in {{1, 2, {m}}} {identical}; refresh queries equal ceil(tokens/s) {counts_ok}"));
    outcome(pass, notes.join("; "))
}

/// Direct reading of the repetition definition: some phrase of length >= 2
/// occupies the last three consecutive blocks.
fn repetition_oracle(t: &[u8]) -> bool {
    (2..=t.len() / 3).any(|len| {
        let end = t.len();
        let last = &t[end - len..];
        (1..3).all(|b| &t[end - (b + 1) * len..end - b * len] == last)
    })
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut agree, mut total, mut positives) = (0, 0, 0);
    for i in 0..2000 {
        let mut t: Vec<u8> = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..4)).collect();
        if i % 2 == 0 {
            let phrase: Vec<u8> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(0..4)).collect();
            let reps = rng.gen_range(2..5);
            for _ in 0..reps {
                t.extend(&phrase);
            }
            if rng.gen_bool(0.3) {
                t.push(9);
            }
        }
        let expected = repetition_oracle(&t);
        positives += usize::from(expected);
        agree += usize::from(is_repetitive(&t) == expected);
        total += 1;
    }

    let mut table = Vec::new();
    for r in 1..=1000u32 {
        let f = (100_000.0 / r as f64).round() as usize;
        table.extend(std::iter::repeat_n(r, f));
    }
    let zipf = zipf_coefficient(&[table]).unwrap();

    let golds = vec!["her husband Albert Brown".to_string(), "Marie Van Brittan Brown".to_string()];
    let em = [
        exact_match("marie van brittan brown", &golds),
        exact_match("sanders associates", &golds),
        exact_match("The Stanley  Hotel!", &["The Stanley Hotel".to_string()]),
    ];

    let c = tiny_retro(16);
    let params = RetroParams::<f64>::init(&c, 7).unwrap();
    let windows: Vec<Vec<TokenId>> = (0..3).map(|_| tokens(&mut rng, 17, 0, 256)).collect();
    let mut batch = Batch::from_windows(&windows, neighbors(&mut rng, &c, 3, 4)).unwrap();
    batch.loss_mask[2][5] = false;
    let logits = forward(&params, &batch.tokens, &batch.neighbors, &batch.pad_mask).unwrap();
    let loss = lm_loss(&logits, &batch.targets, &batch.loss_mask).unwrap();
    let ppl = perplexity(&params, &[batch]).unwrap();
    let ppl_dev = (ppl - loss.exp()).abs();

    outcome(
        agree == total && (zipf - 1.0).abs() <= 0.02 && em == [1, 0, 1] && ppl_dev < 1e-6,
        format!(
            "repetition agreement {agree}/{total} ({positives} positives); Zipf {zipf:.4} (1.0 +/- 0.02); exact match {em:?} (want [1, 0, 1]); |ppl - exp(loss)| {ppl_dev:.1e} (limit 1e-6)"
        ),
    )
}

fn write_corpus(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let words = ["river", "stone", "light", "forest", "market", "winter", "harbor", "engine", "garden", "signal"];
    let lines: Vec<String> = (0..50)
        .map(|i| {
            let text: Vec<&str> = (0..rng.gen_range(30..70)).map(|_| words[rng.gen_range(0..words.len())]).collect();
            serde_json::json!({ "id": format!("doc{i}"), "text": text.join(" ") }).to_string()
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn pipeline_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 11,
        "datastore": { "chunk_size": 16, "embed_dim": 32 },
        "index": { "ncentroids": 16, "M": 4, "bits_per_code": 6, "nprobe_default": 4 },
        "model": { "n_layers": 2, "hidden": 16, "n_heads": 2, "chunk_size": 16, "k_neighbors": 2,
                   "cca_layers": [2], "enc_layers": 1, "max_seq": 64 },
        "training": { "steps": 20, "batch_size": 4, "log_every": 0 },
        "generation": { "max_tokens": 40 },
        "eval": { "selfbleu_samples": 10 }
    })
}

/// Runs the whole pipeline in `dir` and returns the bytes of every artifact.
fn pipeline(dir: &Path, threads: Option<&str>) -> Vec<(String, Vec<u8>)> {
    match threads {
        Some(t) => std::env::set_var("RETRO_THREADS", t),
        None => std::env::remove_var("RETRO_THREADS"),
    }
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    write_corpus(&dir.join("corpus.jsonl"));
    std::fs::write(dir.join("config.json"), pipeline_config().to_string()).unwrap();
    let prompts: Vec<String> = ["river", "winter harbor", "the stone"]
        .iter()
        .map(|s| serde_json::json!({ "prompt": s }).to_string())
        .collect();
    std::fs::write(dir.join("prompts.jsonl"), prompts.join("\n")).unwrap();
    let cfg = p("config.json");
    let steps: Vec<Vec<String>> = vec![
        vec!["build-db", "--config", &cfg, "--corpus", &p("corpus.jsonl"), "--out", &p("db")],
        vec!["build-index", "--config", &cfg, "--db", &p("db")],
        vec!["train", "--config", &cfg, "--db", &p("db"), "--out", &p("run")],
        vec!["generate", "--config", &cfg, "--checkpoint", &p("run/model.rtwt"), "--db", &p("db"), "--prompts", &p("prompts.jsonl"), "--out", &p("gen.jsonl")],
        vec!["eval", "--config", &cfg, "--generations", &p("gen.jsonl"), "--checkpoint", &p("run/model.rtwt"), "--corpus", &p("corpus.jsonl"), "--db", &p("db"), "--out", &p("metrics.json")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for args in steps {
        let code = retro_cli::run(std::iter::once("retro".to_string()).chain(args.iter().cloned()));
        assert_eq!(code, 0, "retro {}", args.join(" "));
    }
    std::env::remove_var("RETRO_THREADS");
    [
        "db/chunks.bin", "db/embeds.bin", "db/manifest.json", "db/run.json", "db/index.bin", "db/index.json",
        "run/model.rtwt", "run/train.json", "gen.jsonl", "gen.run.json", "metrics.json",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), Some("1"));
    let second = pipeline(b.path(), None);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let metrics: serde_json::Value = serde_json::from_slice(&first.last().unwrap().1).unwrap();
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared across two runs with different thread counts, differing: {:?}; metrics {}",
            first.len(),
            differing,
            metrics["metrics"]
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "causality", criterion_2),
        (3, "retrieval benefit on a copy corpus", criterion_3),
        (4, "ANN quality", criterion_4),
        (5, "sub-linear search", criterion_5),
        (6, "padding rules", criterion_6),
        (7, "metric fidelity", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id} ({name}): {} [{:.1} s]", result.detail, t0.elapsed().as_secs_f64());
        if !result.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
