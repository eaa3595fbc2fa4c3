//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use retro_core::ann::IndexConfig;
use retro_core::datastore::DatastoreConfig;
use retro_core::generation::{SamplingParams, Strategy};
use retro_core::model::{ModelConfig, TrainHyper};
use retro_core::{Error, Result};

/// Top-level run configuration. `seed` is required; every section has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub datastore: DatastoreConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Fraction of documents held out for validation.
    pub val_fraction: f64,
    pub log_every: u64,
    /// Drop neighbors drawn from the document being trained on.
    pub exclude_same_doc: bool,
    /// Overrides the index default when retrieving training neighbors.
    pub nprobe: Option<usize>,
    pub optimizer: TrainHyper,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            val_fraction: 0.1,
            log_every: 50,
            exclude_same_doc: true,
            nprobe: None,
            optimizer: TrainHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Tokens between index queries; defaults to the chunk size.
    pub retrieval_step: Option<usize>,
    /// Neighbors actually retrieved per query; defaults to the model's k.
    pub k: Option<usize>,
    pub nprobe: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nucleus,
            top_p: 0.9,
            temperature: 1.0,
            max_tokens: 200,
            retrieval_step: None,
            k: None,
            nprobe: None,
        }
    }
}

impl GenerationConfig {
    pub fn sampling(&self, seed: u64) -> SamplingParams {
        SamplingParams {
            strategy: self.strategy,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed,
            temperature: self.temperature,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["repetition", "selfbleu", "zipf", "perplexity", "em"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub selfbleu_samples: usize,
    pub mc_length_normalized: bool,
    pub qa_max_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            selfbleu_samples: 1000,
            mc_length_normalized: false,
            qa_max_tokens: 32,
        }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            datastore: DatastoreConfig::default(),
            index: IndexConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.datastore.validate()?;
        self.index.validate(self.datastore.embed_dim)?;
        self.validate_model()?;
        if self.model.chunk_size != self.datastore.chunk_size {
            return Err(Error::Config(format!(
                "model chunk_size {} differs from datastore chunk_size {}",
                self.model.chunk_size, self.datastore.chunk_size
            )));
        }
        Ok(())
    }

    /// Checks the sections used once a datastore exists: model, training,
    /// generation and eval.
    pub fn validate_model(&self) -> Result<()> {
        self.model.validate()?;
        self.training.optimizer.validate()?;
        self.generation.sampling(self.seed).validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.training.val_fraction) {
            return Err(Error::Config(format!(
                "training.val_fraction must be in [0, 1), got {}",
                self.training.val_fraction
            )));
        }
        let s = self.retrieval_step();
        if s == 0 || s > self.model.chunk_size {
            return Err(Error::Config(format!(
                "generation.retrieval_step must be in 1..={}, got {s}",
                self.model.chunk_size
            )));
        }
        if let Some(bad) = self.eval.metrics.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown metric {bad:?}")));
        }
        Ok(())
    }

    pub fn retrieval_step(&self) -> usize {
        self.generation.retrieval_step.unwrap_or(self.model.chunk_size)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
