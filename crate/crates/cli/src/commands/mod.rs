//! One function per subcommand.

mod data;
mod infer;
mod train;

use serde_json::json;

use retro_core::ann::AnnIndex;
use retro_core::datastore::{build_datastore, Datastore, CHUNKS_FILE, EMBEDS_FILE, MANIFEST_FILE};

use crate::{index_path, load_config, BuildDbArgs, BuildIndexArgs, CliResult, Command, RunManifest};

pub use data::{doc_streams, Doc, Examples, Retrieval};

/// Vectors handed to the index per `add` call.
const ADD_BATCH: usize = 65_536;

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::BuildDb(a) => build_db(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Train(a) => train::train(a),
        Command::FinetuneQa(a) => train::finetune_qa(a),
        Command::Generate(a) => infer::generate(a),
        Command::Eval(a) => infer::eval(a),
        Command::QaEval(a) => infer::qa_eval(a),
    }
}

fn build_db(a: BuildDbArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(m) = a.chunk_size {
        cfg.datastore.chunk_size = m;
    }
    if let Some(d) = a.dim {
        cfg.datastore.embed_dim = d;
    }
    cfg.datastore.validate()?;
    let ds = build_datastore(&a.corpus, &cfg.datastore, &a.out)?;
    let mut man = RunManifest::new("build-db", &cfg);
    for f in [CHUNKS_FILE, EMBEDS_FILE, MANIFEST_FILE] {
        man.add_file(&a.out.join(f))?;
    }
    man.results = json!({ "num_docs": ds.docs().len(), "num_chunks": ds.len() });
    man.write(&a.out.join("run.json"))?;
    println!("datastore: {} documents, {} chunks -> {}", ds.docs().len(), ds.len(), a.out.display());
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(v) = a.ncentroids {
        cfg.index.ncentroids = v;
    }
    if let Some(v) = a.m_sub {
        cfg.index.m_sub = v;
    }
    if let Some(v) = a.bits {
        cfg.index.bits_per_code = v;
    }
    if let Some(v) = a.nprobe {
        cfg.index.nprobe_default = v;
    }
    let ds = Datastore::open(&a.db)?;
    data::reconcile_datastore(&mut cfg, &ds, a.cfg.config.is_some())?;
    let dim = ds.config().embed_dim;
    cfg.index.validate(dim)?;
    let mut index = AnnIndex::train(ds.embeddings(), dim, &cfg.index)?;
    let ids: Vec<u64> = (0..ds.len() as u64).collect();
    for (vecs, ids) in ds.embeddings().chunks(dim * ADD_BATCH).zip(ids.chunks(ADD_BATCH)) {
        index.add(vecs, ids)?;
    }
    let path = index_path(&a.db, a.out.as_ref());
    index.save(&path)?;
    let mut man = RunManifest::new("build-index", &cfg);
    man.add_file(&path)?;
    man.results = json!({ "num_vectors": index.len(), "dim": dim });
    man.write(&path.with_extension("json"))?;
    println!("index: {} vectors, {} lists -> {}", index.len(), cfg.index.ncentroids, path.display());
    Ok(())
}
