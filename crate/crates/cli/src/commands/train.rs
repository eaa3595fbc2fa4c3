use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use retro_core::eval::perplexity;
use retro_core::generation::{answer_tokens, batch_pad_qa, evidence_neighbors, format_qa, read_qa, QaSample, QaTemplate};
use retro_core::model::{load_checkpoint, save_checkpoint, Neighbor, NeighborSet, TrainHyper};
use retro_core::numerics::AdamState;
use retro_core::tokenizer::{encode, TokenId};
use retro_core::{model, Error, Result, RetroParams32};

use super::data::{doc_streams, reconcile_datastore, reconcile_model, Examples, Retrieval};
use crate::{CliError, CliResult, FinetuneQaArgs, RunConfig, RunManifest, TrainArgs};

const CHECKPOINT_FILE: &str = "model.rtwt";

fn create_dir(dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Returns `(train, validation)` document indices.
fn split_docs(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1_7));
    let mut n_val = (fraction * n as f64).floor() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.max(1);
    }
    let mut val = order.split_off(n - n_val);
    let mut train = order;
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct LoopReport {
    losses: Vec<f64>,
    grad_norms: Vec<f64>,
}

/// Runs `steps` Adam steps on batches drawn by `draw`.
fn optimize(
    params: &mut RetroParams32,
    steps: u64,
    hyper: &TrainHyper,
    log_every: u64,
    mut draw: impl FnMut(u64) -> Result<model::Batch>,
) -> Result<LoopReport> {
    let mut state = AdamState::new(params);
    let mut report = LoopReport {
        losses: Vec::with_capacity(steps as usize),
        grad_norms: Vec::with_capacity(steps as usize),
    };
    for step in 0..steps {
        let batch = draw(step)?;
        let r = model::train_step(params, &mut state, &batch, hyper)?;
        if log_every > 0 && (step % log_every == 0 || step + 1 == steps) {
            eprintln!("step {step:>6}  loss {:.4}  grad_norm {:.3}  lr {:.2e}", r.loss, r.grad_norm, r.lr);
        }
        report.losses.push(r.loss);
        report.grad_norms.push(r.grad_norm);
    }
    Ok(report)
}

pub(super) fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    cfg.validate()?;
    if a.retrieval.db.is_none() {
        return Err(CliError::Usage("train needs --db".into()));
    }
    let retrieval = Retrieval::open(&a.retrieval)?.expect("db checked above");
    reconcile_datastore(&mut cfg, &retrieval.datastore, true)?;
    let t = &cfg.training;
    let docs = doc_streams(&retrieval.datastore, t.exclude_same_doc)?;
    let (train_ids, val_ids) = split_docs(docs.len(), t.val_fraction, cfg.seed);
    let pick = |ids: &[usize]| ids.iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
    let train_ex = Examples::build(&pick(&train_ids), &cfg.model, Some(&retrieval), t.nprobe)?;
    let val_ex = Examples::build(&pick(&val_ids), &cfg.model, Some(&retrieval), t.nprobe)?;
    if train_ex.is_empty() {
        return Err(Error::Argument("no training windows: the datastore holds no usable documents".into()).into());
    }

    let mut params = RetroParams32::init(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c);
    let bs = t.batch_size;
    let report = optimize(&mut params, t.steps, &t.optimizer, t.log_every, |_| {
        let rows: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..train_ex.len())).collect();
        Ok(train_ex.batch(&rows))
    })?;
    let val_ppl = if val_ex.is_empty() {
        None
    } else {
        Some(perplexity(&params, &val_ex.batches(bs))?)
    };

    let ckpt = a.out.join(CHECKPOINT_FILE);
    create_dir(&a.out)?;
    save_checkpoint(&params, &ckpt)?;
    let mut man = RunManifest::new("train", &cfg);
    man.add_file(&ckpt)?;
    man.results = json!({
        "train_docs": train_ids.len(),
        "val_docs": val_ids.len(),
        "train_windows": train_ex.len(),
        "val_windows": val_ex.len(),
        "num_params": retro_core::numerics::ParamTensors::num_params(&params),
        "initial_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "val_loss": val_ppl.map(f64::ln),
        "val_perplexity": val_ppl,
        "losses": report.losses,
        "grad_norms": report.grad_norms,
    });
    man.write(&a.out.join("train.json"))?;
    match val_ppl {
        Some(p) => println!("trained {} steps; validation perplexity {p:.3} -> {}", t.steps, ckpt.display()),
        None => println!("trained {} steps -> {}", t.steps, ckpt.display()),
    }
    Ok(())
}

/// Keeps the end of `context` so that it and `answer_len` answer tokens fit in
/// `max_seq` once both are padded to chunk boundaries.
pub(crate) fn fit_context(context: &[TokenId], answer_len: usize, m: usize, max_seq: usize) -> Result<Vec<TokenId>> {
    let answer_span = answer_len.div_ceil(m) * m;
    if answer_span >= max_seq {
        return Err(Error::Length(format!(
            "answer of {answer_len} tokens leaves no room for context within max_seq {max_seq}"
        )));
    }
    let budget = max_seq - answer_span;
    Ok(context[context.len().saturating_sub(budget)..].to_vec())
}

pub(super) fn finetune_qa(a: FinetuneQaArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    let template: QaTemplate = a.template.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let mut params = match &a.checkpoint {
        Some(p) => load_checkpoint::<f32>(p)?,
        None => RetroParams32::init(&cfg.model, cfg.seed)?,
    };
    reconcile_model(&mut cfg, &params.config, true)?;
    cfg.validate_model()?;
    let c = params.config.clone();
    let (m, k) = (c.chunk_size, c.k_neighbors);

    let mut samples: Vec<(QaSample, Vec<Neighbor>)> = Vec::new();
    for (i, r) in read_qa(&a.data)?.iter().enumerate() {
        let Some(answer) = r.answers.first() else {
            log::warn!("QA record {i} has no answers; skipped");
            continue;
        };
        let prompt = format_qa(&r.question, &r.passages, template, k)?;
        let answer = answer_tokens(answer);
        let context = fit_context(&encode(&prompt.decoder_text), answer.len(), m, c.max_seq)?;
        let ev = evidence_neighbors(&prompt.encoder_evidences, k, c.neighbor_len());
        samples.push((QaSample { context, answer }, ev));
    }
    if samples.is_empty() {
        return Err(Error::Argument(format!("{} holds no usable QA records", a.data.display())).into());
    }

    let t = &cfg.training;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a_f7);
    let report = optimize(&mut params, t.steps, &t.optimizer, t.log_every, |_| {
        let rows: Vec<usize> = (0..t.batch_size).map(|_| rng.gen_range(0..samples.len())).collect();
        let batch: Vec<QaSample> = rows.iter().map(|&r| samples[r].0.clone()).collect();
        let padded = batch_pad_qa(&batch, m, c.max_seq)?;
        let items = rows.iter().map(|&r| vec![samples[r].1.clone(); padded.chunks]).collect();
        Ok(padded.into_batch(NeighborSet {
            k,
            neighbor_len: c.neighbor_len(),
            items,
        }))
    })?;

    let ckpt = a.out.join(CHECKPOINT_FILE);
    create_dir(&a.out)?;
    save_checkpoint(&params, &ckpt)?;
    let mut man = RunManifest::new("finetune-qa", &cfg);
    man.add_file(&ckpt)?;
    man.results = json!({
        "template": template.to_string(),
        "samples": samples.len(),
        "initial_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "losses": report.losses,
    });
    man.write(&a.out.join("finetune.json"))?;
    println!("fine-tuned {} steps on {} QA samples -> {}", t.steps, samples.len(), ckpt.display());
    Ok(())
}
