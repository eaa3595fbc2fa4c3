use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use retro_core::datastore::read_corpus;
use retro_core::eval::{
    exact_match, perplexity, read_generations, read_jsonl, repetition_rate, self_bleu, word_ids, write_jsonl,
    zipf_coefficient, GenerationRecord, MetricsReport,
};
use retro_core::generation::{
    evidence_neighbors, format_qa, read_qa, FixedNeighbors, GenerationSession, NeighborSource, QaTemplate,
    SamplingParams, Strategy,
};
use retro_core::model::load_checkpoint;
use retro_core::tokenizer::{decode, encode, TokenId};
use retro_core::{Error, Result, RetroParams32};

use super::data::{reconcile_datastore, reconcile_model, Doc, Examples, Limited, Retrieval};
use crate::manifest::write_json;
use crate::{load_config, CliError, CliResult, EvalArgs, GenerateArgs, QaEvalArgs, RunConfig, RunManifest, TOOL_VERSION};

#[derive(Deserialize)]
struct PromptLine {
    prompt: String,
    #[serde(default)]
    answers: Option<Vec<String>>,
}

/// Keeps the last `max_seq` tokens.
fn clip_prompt(tokens: Vec<TokenId>, max_seq: usize) -> Vec<TokenId> {
    if tokens.len() <= max_seq {
        return tokens;
    }
    log::warn!("prompt of {} tokens truncated to the last {max_seq}", tokens.len());
    tokens[tokens.len() - max_seq..].to_vec()
}

fn open_model(cfg: &mut RunConfig, path: &Path, explicit: bool) -> Result<RetroParams32> {
    let params = load_checkpoint::<f32>(path)?;
    reconcile_model(cfg, &params.config, explicit)?;
    cfg.validate_model()?;
    Ok(params)
}

fn open_retrieval(cfg: &mut RunConfig, args: &crate::RetrievalArgs, explicit: bool) -> Result<Option<Retrieval>> {
    let r = Retrieval::open(args)?;
    if let Some(r) = &r {
        reconcile_datastore(cfg, &r.datastore, explicit)?;
        if r.datastore.chunk_size() != cfg.model.chunk_size {
            return Err(Error::Config(format!(
                "datastore chunk size {} differs from model chunk size {}",
                r.datastore.chunk_size(),
                cfg.model.chunk_size
            )));
        }
    }
    Ok(r)
}

pub(super) fn generate(a: GenerateArgs) -> CliResult<()> {
    let explicit = a.cfg.config.is_some();
    let mut cfg = load_config(&a.cfg)?;
    let g = &mut cfg.generation;
    if a.retrieval_step.is_some() {
        g.retrieval_step = a.retrieval_step;
    }
    if let Some(p) = a.top_p {
        g.top_p = p;
    }
    if let Some(n) = a.max_tokens {
        g.max_tokens = n;
    }
    if a.k.is_some() {
        g.k = a.k;
    }
    if a.greedy {
        g.strategy = Strategy::Greedy;
    }
    let params = open_model(&mut cfg, &a.checkpoint, explicit)?;
    let retrieval = open_retrieval(&mut cfg, &a.retrieval, explicit)?;
    let c = &params.config;
    let k = cfg.generation.k.unwrap_or(c.k_neighbors);
    if k > c.k_neighbors {
        return Err(Error::Config(format!("--k {k} exceeds the model's {} neighbors", c.k_neighbors)).into());
    }
    let prompts: Vec<PromptLine> = match (&a.prompt, &a.prompts) {
        (Some(p), None) => vec![PromptLine {
            prompt: p.clone(),
            answers: None,
        }],
        (None, Some(f)) => read_jsonl(f)?,
        _ => return Err(CliError::Usage("generate needs --prompt or --prompts".into())),
    };

    let empty = FixedNeighbors::default();
    let base: Box<dyn NeighborSource + '_> = match &retrieval {
        Some(r) => r.source(cfg.generation.nprobe, None)?,
        None => Box::new(empty),
    };
    let source = Limited { inner: base.as_ref(), k };
    let step = cfg.retrieval_step();
    let outputs: Vec<(GenerationRecord, usize, usize)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut session = GenerationSession::new(&params, &source, step)?;
            let sampling = cfg.generation.sampling(cfg.seed.wrapping_add(i as u64));
            let tokens = session.generate(&clip_prompt(encode(&p.prompt), c.max_seq), &sampling)?;
            let rec = GenerationRecord {
                prompt: p.prompt.clone(),
                continuation: decode(&tokens)?,
                tokens: Some(tokens),
                answers: p.answers.clone(),
            };
            Ok((rec, session.prefill_queries(), session.refresh_queries()))
        })
        .collect::<Result<_>>()?;
    let records: Vec<GenerationRecord> = outputs.iter().map(|o| o.0.clone()).collect();
    write_jsonl(&a.out, &records)?;
    let mut man = RunManifest::new("generate", &cfg);
    man.add_file(&a.out)?;
    man.results = json!({
        "prompts": records.len(),
        "generated_tokens": records.iter().map(|r| r.tokens.as_ref().map_or(0, Vec::len)).sum::<usize>(),
        "prefill_queries": outputs.iter().map(|o| o.1).sum::<usize>(),
        "refresh_queries": outputs.iter().map(|o| o.2).sum::<usize>(),
    });
    man.write(&a.out.with_extension("run.json"))?;
    if a.prompt.is_some() {
        println!("{}", records[0].continuation);
    } else {
        println!("{} generations -> {}", records.len(), a.out.display());
    }
    Ok(())
}

fn emit<V: Serialize>(out: Option<&Path>, value: &V) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?),
    }
    Ok(())
}

/// Logs why a metric is null.
fn optional(name: &str, r: Result<f64>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{name}: {e}");
            None
        }
    }
}

pub(super) fn eval(a: EvalArgs) -> CliResult<()> {
    let explicit = a.cfg.config.is_some();
    let mut cfg = load_config(&a.cfg)?;
    if let Some(ms) = &a.metrics {
        cfg.eval.metrics = ms.clone();
    }
    let wanted = |m: &str| cfg.eval.metrics.iter().any(|x| x == m);
    let records = read_generations(&a.generations)?;
    let words = word_ids(&records.iter().map(|r| r.continuation.clone()).collect::<Vec<_>>());
    let mut metrics: BTreeMap<String, Option<f64>> =
        crate::config::METRIC_NAMES.iter().map(|m| (m.to_string(), None)).collect();

    if wanted("repetition") {
        metrics.insert("repetition".into(), optional("repetition", repetition_rate(&words)));
    }
    if wanted("selfbleu") {
        let v = self_bleu(&words, cfg.eval.selfbleu_samples, cfg.seed);
        metrics.insert("selfbleu".into(), optional("selfbleu", v));
    }
    if wanted("zipf") {
        metrics.insert("zipf".into(), optional("zipf", zipf_coefficient(&words)));
    }
    if wanted("em") {
        let scored: Vec<u8> = records
            .iter()
            .filter_map(|r| r.answers.as_ref().map(|g| exact_match(&r.continuation, g)))
            .collect();
        let v = if scored.is_empty() {
            Err(Error::Argument("no generation carries reference answers".into()))
        } else {
            Ok(scored.iter().map(|&x| f64::from(x)).sum::<f64>() / scored.len() as f64)
        };
        metrics.insert("em".into(), optional("em", v));
    }
    if wanted("perplexity") {
        let v = match (&a.checkpoint, &a.corpus) {
            (Some(ckpt), Some(corpus)) => corpus_perplexity(&mut cfg, ckpt, corpus, &a.retrieval, explicit),
            _ => Err(Error::Argument("perplexity needs --checkpoint and --corpus".into())),
        };
        metrics.insert("perplexity".into(), optional("perplexity", v));
    }
    let report = MetricsReport {
        metrics,
        seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
        config: cfg.echo(),
    };
    emit(a.out.as_deref(), &report)
}

fn corpus_perplexity(
    cfg: &mut RunConfig,
    ckpt: &Path,
    corpus: &Path,
    retrieval: &crate::RetrievalArgs,
    explicit: bool,
) -> Result<f64> {
    let params = open_model(cfg, ckpt, explicit)?;
    let retrieval = open_retrieval(cfg, retrieval, explicit)?;
    let docs: Vec<Doc> = read_corpus(corpus)?
        .into_iter()
        .map(|(id, text)| {
            let mut tokens = encode(&text);
            tokens.push(retro_core::tokenizer::EOT_ID);
            let exclude = retrieval
                .as_ref()
                .filter(|_| cfg.training.exclude_same_doc)
                .and_then(|r| r.doc_range(&id));
            Doc { tokens, exclude }
        })
        .collect();
    let ex = Examples::build(&docs, &params.config, retrieval.as_ref(), cfg.training.nprobe)?;
    if ex.is_empty() {
        return Err(Error::Argument(format!("{} holds no scorable text", corpus.display())));
    }
    perplexity(&params, &ex.batches(cfg.training.batch_size))
}

#[derive(Serialize)]
struct QaPrediction<'a> {
    question: &'a str,
    prediction: String,
    answers: &'a [String],
    em: u8,
}

/// The generated answer: text up to the first line break, trimmed.
fn answer_text(tokens: &[TokenId]) -> Result<String> {
    let text = decode(tokens)?;
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}

pub(super) fn qa_eval(a: QaEvalArgs) -> CliResult<()> {
    let explicit = a.cfg.config.is_some();
    let mut cfg = load_config(&a.cfg)?;
    let template: QaTemplate = a.template.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let params = open_model(&mut cfg, &a.checkpoint, explicit)?;
    let c = &params.config;
    let records = read_qa(&a.data)?;
    let sampling = SamplingParams::greedy(cfg.eval.qa_max_tokens);
    let preds: Vec<QaPrediction> = records
        .par_iter()
        .map(|r| {
            let prompt = format_qa(&r.question, &r.passages, template, c.k_neighbors)?;
            let source = FixedNeighbors(evidence_neighbors(&prompt.encoder_evidences, c.k_neighbors, c.neighbor_len()));
            let mut session = GenerationSession::new(&params, &source, c.chunk_size)?;
            let context = clip_prompt(encode(&prompt.decoder_text), c.max_seq);
            let prediction = answer_text(&session.generate(&context, &sampling)?)?;
            let em = exact_match(&prediction, &r.answers);
            Ok(QaPrediction {
                question: &r.question,
                prediction,
                answers: &r.answers,
                em,
            })
        })
        .collect::<Result<_>>()?;
    if preds.is_empty() {
        return Err(Error::Argument(format!("{} holds no QA records", a.data.display())).into());
    }
    if let Some(p) = &a.predictions {
        write_jsonl(p, &preds)?;
    }
    let em = preds.iter().map(|p| f64::from(p.em)).sum::<f64>() / preds.len() as f64;
    let report = MetricsReport {
        metrics: BTreeMap::from([("em".to_string(), Some(em))]),
        seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
        config: json!({ "run": cfg.echo(), "template": template.to_string(), "questions": preds.len() }),
    };
    emit(a.out.as_deref(), &report)
}
