//! Pipeline configuration.
//!
//! A config file is TOML. Its values are laid over a preset chosen by the
//! run mode: `full` carries the reference hyperparameters, `desk` the same
//! except for the backbone learning-rate schedule used for from-scratch
//! training of the small model. Unknown keys are rejected with the list of
//! valid ones.
//!
//! Every artifact embeds a hash of the settings it depends on. Stage
//! hashes chain: a retrieval cache depends on the data and the retriever,
//! a checkpoint on that plus labeling, fusion, model and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entail::LabelerConfig;
use crate::error::{Error, Result};
use crate::eval::InferenceConfig;
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::retrieval::DualEncoderConfig;
use crate::segment::SegmenterConfig;
use crate::train::TrainingConfig;

/// Bumped whenever an artifact layout changes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Desk,
    Full,
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown mode `{s}`; expected desk or full"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Tfidf,
    Dense,
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(Self::Tfidf),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Config(format!("unknown retriever type `{s}`; expected tfidf or dense"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPaths {
    pub kb: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

impl Default for CorpusPaths {
    fn default() -> Self {
        Self {
            kb: "data/kb.jsonl".into(),
            train: "data/train.jsonl".into(),
            dev: "data/dev.jsonl".into(),
            test: "data/test.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    /// Ranks kept per utterance in the retrieval cache.
    pub top_n: usize,
    pub dense: DualEncoderConfig,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { kind: RetrieverKind::Dense, top_n: 20, dense: DualEncoderConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub run_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub segmenter: SegmenterConfig,
    pub labeler: LabelerConfig,
    pub retriever: RetrieverConfig,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub evaluation: InferenceConfig,
}

impl PipelineConfig {
    /// Defaults for a mode.
    pub fn preset(mode: RunMode) -> Self {
        let mut training = TrainingConfig::default();
        if mode == RunMode::Desk {
            training.lr_backbone = 5e-4;
            training.warmup_steps = 200;
            training.max_epochs = 10;
        }
        Self {
            seed: 1,
            mode,
            run_dir: "runs/default".into(),
            corpus: CorpusPaths::default(),
            segmenter: SegmenterConfig::default(),
            labeler: LabelerConfig::default(),
            retriever: RetrieverConfig::default(),
            fusion: FusionConfig::default(),
            model: ModelConfig::default(),
            training,
            evaluation: InferenceConfig::default(),
        }
    }

    /// Lay `text` over the preset of its `mode` key (default `desk`, or
    /// `mode_override` when given).
    pub fn from_toml(text: &str, mode_override: Option<RunMode>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mode = match (mode_override, file.get("mode")) {
            (Some(m), _) => m,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(other)) => return Err(Error::Config(format!("mode must be a string, found {other}"))),
            (None, None) => RunMode::Desk,
        };
        let mut merged = toml::Table::try_from(Self::preset(mode)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("mode".into(), toml::Value::String(if mode == RunMode::Desk { "desk" } else { "full" }.into()));
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, mode_override: Option<RunMode>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, mode_override).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `OCMRC_KB`, `OCMRC_TRAIN`, `OCMRC_DEV`, `OCMRC_TEST` and
    /// `OCMRC_RUN_DIR` from the environment.
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var_os(k).map(PathBuf::from);
        if let Some(p) = var("OCMRC_KB") {
            self.corpus.kb = p;
        }
        if let Some(p) = var("OCMRC_TRAIN") {
            self.corpus.train = p;
        }
        if let Some(p) = var("OCMRC_DEV") {
            self.corpus.dev = p;
        }
        if let Some(p) = var("OCMRC_TEST") {
            self.corpus.test = p;
        }
        if let Some(p) = var("OCMRC_RUN_DIR") {
            self.run_dir = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.retriever.dense.validate()?;
        if self.retriever.top_n == 0 {
            return Err(Error::Config("retriever.top_n must be at least 1".into()));
        }
        self.fusion.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.evaluation.k == 0 || self.evaluation.beam_size == 0 {
            return Err(Error::Config("evaluation.k and evaluation.beam_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model config with the global seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { init_seed: self.seed, ..self.model.clone() }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig { seed: self.seed, ..self.training.clone() }
    }

    /// Inference settings; the fusion ablation also limits inference to
    /// the top candidate.
    pub fn inference_config(&self) -> InferenceConfig {
        let mut c = self.evaluation.clone();
        if !self.training.ablation.fusion {
            c.k = 1;
        }
        c
    }

    pub fn dense_config(&self) -> DualEncoderConfig {
        DualEncoderConfig { seed: self.seed, ..self.retriever.dense.clone() }
    }

    /// Hash of the retriever stage: data, segmentation, retriever settings.
    pub fn retriever_hash(&self, data: &str) -> String {
        hash_parts(&[
            &"retriever",
            &FORMAT_VERSION,
            &data,
            &self.seed,
            &self.segmenter,
            &self.retriever,
        ])
    }

    /// Hash of the reader stage, chained on the retriever stage.
    pub fn reader_hash(&self, data: &str) -> String {
        hash_parts(&[
            &"reader",
            &self.retriever_hash(data),
            &self.labeler,
            &self.fusion,
            &self.model,
            &self.training,
        ])
    }

    /// Hash of the whole configuration (paths excluded) and the data.
    pub fn config_hash(&self, data: &str) -> String {
        hash_parts(&[&"config", &self.reader_hash(data), &self.evaluation, &self.mode])
    }

    /// Hash of the labels sidecar.
    pub fn label_hash(&self, data: &str) -> String {
        hash_parts(&[&"labels", &FORMAT_VERSION, &data, &self.segmenter, &self.labeler])
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(RunMode::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Hex SHA-256 of the JSON encodings of `parts`.
pub fn hash_parts(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        let s = p.json();
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of raw bytes.
pub fn hash_bytes(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    hex::encode(h.finalize())
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config values serialize")
        }
    }
}
