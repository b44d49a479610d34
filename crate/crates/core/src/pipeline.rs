//! Pipeline stages behind the command-line tool.
//!
//! Every stage reads its inputs from the paths in a [`PipelineConfig`],
//! writes artifacts under the run directory, and embeds the relevant stage
//! hash in each artifact. A consumer that finds a different hash fails
//! with [`Error::StaleCache`] rather than mixing settings.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml               resolved configuration
//! manifest.json             hashes and tool version
//! labels.json               heuristic entailment labels
//! retriever/index.json      retriever (tf-idf or dense)
//! retrieval/{split}.jsonl   top-n rankings per utterance
//! retrieval/report.json     top-k retrieval accuracy
//! reader/checkpoint.json    reader parameters and vocabulary
//! reader/train_log.jsonl    one record per optimization step
//! reports/{split}.json      evaluation report
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{hash_bytes, PipelineConfig, RetrieverKind, FORMAT_VERSION};
use crate::corpus::{write_atomic, DatasetSplit, KnowledgeBase, SplitName, SubsetIndex};
use crate::entail::{label_split, EntailmentLabelSequence, LabelCache};
use crate::error::{Error, Result};
use crate::eval::{build_report, entailment_accuracy, predict_split, render_table, score_predictions, EvaluationReport};
use crate::fusion::instrument;
use crate::model::{Checkpoint, Reader};
use crate::retrieval::{
    evaluate_retrieval, load_cache, retrieve_split, save_cache, DualEncoder, RetrievalReport, RetrievalResult,
    Retriever, TfidfIndex,
};
use crate::segment::{segment_kb, RuleSegmenter};
use crate::synth::{generate, SyntheticSpec};
use crate::text::Vocab;
use crate::train::{train, write_log, DevSet};

/// Loaded, segmented corpus with a fingerprint of the raw files.
pub struct Data {
    pub kb: KnowledgeBase,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub fingerprint: String,
}

impl Data {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn parse_split_name(s: &str) -> Result<SplitName> {
    match s {
        "train" => Ok(SplitName::Train),
        "dev" => Ok(SplitName::Dev),
        "test" => Ok(SplitName::Test),
        _ => Err(Error::Config(format!("unknown split `{s}`; expected train, dev or test"))),
    }
}

/// Read the corpus files named in `cfg` and segment the knowledge base.
pub fn load_data(cfg: &PipelineConfig) -> Result<Data> {
    let c = &cfg.corpus;
    let texts = [read(&c.kb)?, read(&c.train)?, read(&c.dev)?, read(&c.test)?];
    let fingerprint = hash_bytes(&texts.iter().map(|t| t.as_bytes()).collect::<Vec<_>>());
    let kb = KnowledgeBase::from_jsonl(&texts[0], &c.kb)?;
    let kb = segment_kb(&kb, &RuleSegmenter::new(&cfg.segmenter)?)?;
    let train = DatasetSplit::from_jsonl(&texts[1], SplitName::Train, &c.train, &kb)?;
    let dev = DatasetSplit::from_jsonl(&texts[2], SplitName::Dev, &c.dev, &kb)?;
    let test = DatasetSplit::from_jsonl(&texts[3], SplitName::Test, &c.test, &kb)?;
    Ok(Data { kb, train, dev, test, fingerprint })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    format: u32,
    data: String,
    config_hash: String,
    retriever_hash: String,
    reader_hash: String,
}

/// Write the resolved config and the manifest into the run directory.
pub fn snapshot(cfg: &PipelineConfig, data: &Data) -> Result<()> {
    mkdir(&cfg.run_dir)?;
    write_atomic(&cfg.run_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let m = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        format: FORMAT_VERSION,
        data: data.fingerprint.clone(),
        config_hash: cfg.config_hash(&data.fingerprint),
        retriever_hash: cfg.retriever_hash(&data.fingerprint),
        reader_hash: cfg.reader_hash(&data.fingerprint),
    };
    write_atomic(&cfg.run_dir.join("manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())
}

/// Write a synthetic benchmark in corpus format, plus its exact labels.
pub fn synth_command(spec_path: Option<&Path>, out: &Path) -> Result<SyntheticSpec> {
    let spec: SyntheticSpec = match spec_path {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
        None => SyntheticSpec::default(),
    };
    let bench = generate(&spec)?;
    mkdir(out)?;
    write_atomic(&out.join("kb.jsonl"), bench.kb.to_jsonl()?.as_bytes())?;
    for s in [&bench.train, &bench.dev, &bench.test] {
        write_atomic(&out.join(format!("{}.jsonl", s.name.as_str())), s.to_jsonl()?.as_bytes())?;
    }
    let truth: BTreeMap<&String, &Vec<crate::entail::EntailmentLabel>> =
        bench.truth.iter().map(|(k, v)| (k, &v.edu_labels)).collect();
    write_atomic(&out.join("truth.json"), serde_json::to_string(&truth)?.as_bytes())?;
    write_atomic(&out.join("spec.toml"), toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?.as_bytes())?;
    Ok(spec)
}

/// Validate and normalize a corpus: segmented knowledge base, split
/// copies and a labels sidecar.
pub fn ingest_command(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    mkdir(out)?;
    let kb_text = data.kb.to_jsonl()?;
    write_atomic(&out.join("kb.jsonl"), kb_text.as_bytes())?;
    let mut texts = vec![kb_text];
    for s in [&data.train, &data.dev, &data.test] {
        let t = s.to_jsonl()?;
        write_atomic(&out.join(format!("{}.jsonl", s.name.as_str())), t.as_bytes())?;
        texts.push(t);
    }
    let fingerprint = hash_bytes(&texts.iter().map(|t| t.as_bytes()).collect::<Vec<_>>());
    let labels = all_labels(cfg, &data)?;
    LabelCache { config_hash: cfg.label_hash(&fingerprint), labels }.save(&out.join("labels.json"))
}

fn all_labels(cfg: &PipelineConfig, data: &Data) -> Result<BTreeMap<String, EntailmentLabelSequence>> {
    let mut labels = BTreeMap::new();
    for s in [&data.train, &data.dev, &data.test] {
        labels.extend(label_split(s, &data.kb, &cfg.labeler)?);
    }
    Ok(labels)
}

/// Labels from the run directory sidecar, computed and written if absent.
pub fn labels(cfg: &PipelineConfig, data: &Data) -> Result<BTreeMap<String, EntailmentLabelSequence>> {
    let path = cfg.run_dir.join("labels.json");
    let hash = cfg.label_hash(&data.fingerprint);
    if path.exists() {
        return Ok(LabelCache::load(&path, &hash)?.labels);
    }
    let labels = all_labels(cfg, data)?;
    mkdir(&cfg.run_dir)?;
    LabelCache { config_hash: hash, labels: labels.clone() }.save(&path)?;
    Ok(labels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexKind {
    Tfidf(TfidfIndex),
    Dense(DualEncoder<f32>),
}

impl Retriever for IndexKind {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        match self {
            Self::Tfidf(i) => i.retrieve(query, k),
            Self::Dense(d) => d.retrieve(query, k),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexArtifact {
    pub format: u32,
    pub config_hash: String,
    pub index: IndexKind,
}

impl IndexArtifact {
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let mut a: Self = serde_json::from_str(&read(path)?)?;
        if a.format != FORMAT_VERSION || a.config_hash != expected_hash {
            return Err(Error::StaleCache { path: path.to_path_buf(), expected: expected_hash.into(), found: a.config_hash });
        }
        if let IndexKind::Dense(d) = &mut a.index {
            d.after_load();
        }
        Ok(a)
    }
}

/// Build a retriever index into `out/index.json`.
pub fn build_index(cfg: &PipelineConfig, data: &Data, out: &Path) -> Result<PathBuf> {
    mkdir(out)?;
    let index = match cfg.retriever.kind {
        RetrieverKind::Tfidf => IndexKind::Tfidf(TfidfIndex::build(&data.kb)?),
        RetrieverKind::Dense => {
            let mut enc = DualEncoder::<f32>::new(&data.kb, &data.train, cfg.dense_config())?;
            let log = enc.train(&data.kb, &data.train)?;
            let mut text = String::new();
            for e in &log {
                text.push_str(&serde_json::to_string(e)?);
                text.push('\n');
            }
            write_atomic(&out.join("retriever_log.jsonl"), text.as_bytes())?;
            IndexKind::Dense(enc)
        }
    };
    let artifact = IndexArtifact { format: FORMAT_VERSION, config_hash: cfg.retriever_hash(&data.fingerprint), index };
    let path = out.join("index.json");
    write_atomic(&path, serde_json::to_string(&artifact)?.as_bytes())?;
    Ok(path)
}

/// Train (or build) the configured retriever under the run directory.
pub fn train_retriever_command(cfg: &PipelineConfig) -> Result<PathBuf> {
    let data = load_data(cfg)?;
    snapshot(cfg, &data)?;
    build_index(cfg, &data, &cfg.run_dir.join("retriever"))
}

fn retrieval_path(cfg: &PipelineConfig, split: SplitName) -> PathBuf {
    cfg.run_dir.join("retrieval").join(format!("{}.jsonl", split.as_str()))
}

/// Rank every utterance of every split and cache the top-n lists.
pub fn retrieve_command(cfg: &PipelineConfig, index_path: Option<&Path>) -> Result<BTreeMap<String, RetrievalReport>> {
    let data = load_data(cfg)?;
    snapshot(cfg, &data)?;
    let hash = cfg.retriever_hash(&data.fingerprint);
    let default_path = cfg.run_dir.join("retriever").join("index.json");
    let artifact = IndexArtifact::load(index_path.unwrap_or(&default_path), &hash)?;
    let subsets = SubsetIndex::from_train(&data.train);
    let mut reports = BTreeMap::new();
    for name in [SplitName::Train, SplitName::Dev, SplitName::Test] {
        let split = data.split(name);
        let results = retrieve_split(&artifact.index, split, cfg.retriever.top_n)?;
        let path = retrieval_path(cfg, name);
        mkdir(path.parent().expect("has parent"))?;
        save_cache(&path, &hash, &results)?;
        if !split.is_empty() {
            reports.insert(name.as_str().to_string(), evaluate_retrieval(&results, split, &subsets)?);
        }
    }
    write_atomic(&cfg.run_dir.join("retrieval").join("report.json"), serde_json::to_string_pretty(&reports)?.as_bytes())?;
    Ok(reports)
}

pub fn load_retrieval(cfg: &PipelineConfig, data: &Data, split: SplitName) -> Result<BTreeMap<String, RetrievalResult>> {
    load_cache(&retrieval_path(cfg, split), &cfg.retriever_hash(&data.fingerprint))
}

/// Reader vocabulary: specials, rule EDUs, then training dialogue text and
/// the two decision words.
pub fn build_vocab(kb: &KnowledgeBase, train: &DatasetSplit) -> Vocab {
    let mut texts: Vec<&str> = vec!["yes no"];
    for d in kb.documents() {
        texts.extend(d.edus.iter().map(String::as_str));
    }
    for i in &train.instances {
        texts.push(&i.question);
        texts.push(&i.scenario);
        texts.extend(i.history.iter().map(|t| t.follow_up_question.as_str()));
        texts.push(&i.gold_answer);
    }
    Vocab::build(texts)
}

pub fn checkpoint_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.run_dir.join("reader").join("checkpoint.json")
}

/// Train the reader from cached retrieval; returns the checkpoint path and id.
pub fn train_reader_command(cfg: &PipelineConfig) -> Result<(PathBuf, String)> {
    let data = load_data(cfg)?;
    snapshot(cfg, &data)?;
    let labels = labels(cfg, &data)?;
    let train_ret = load_retrieval(cfg, &data, SplitName::Train)?;
    let dev_ret = load_retrieval(cfg, &data, SplitName::Dev)?;
    let subsets = SubsetIndex::from_train(&data.train);
    let reader = Reader::<f32>::new(cfg.model_config(), build_vocab(&data.kb, &data.train))?;
    let dev = DevSet { split: &data.dev, retrieval: &dev_ret, subsets: &subsets, inference: cfg.inference_config() };
    let dir = cfg.run_dir.join("reader");
    mkdir(&dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let outcome = train(
        reader,
        &data.kb,
        &data.train,
        &train_ret,
        &labels,
        &cfg.fusion,
        &cfg.training_config(),
        (!data.dev.is_empty()).then_some(&dev),
        |e| write_log(&mut log_file, e),
    )?;
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    write_atomic(&dir.join("evals.json"), serde_json::to_string_pretty(&outcome.evals)?.as_bytes())?;
    let ck = Checkpoint {
        format: FORMAT_VERSION,
        config_hash: cfg.reader_hash(&data.fingerprint),
        step: outcome.best_step,
        reader: outcome.reader,
    };
    let path = checkpoint_path(cfg);
    let id = ck.save(&path)?;
    Ok((path, id))
}

/// Evaluate a checkpoint on a split and write `reports/{split}.json`.
pub fn evaluate_command(cfg: &PipelineConfig, checkpoint: &Path, split: SplitName) -> Result<(PathBuf, EvaluationReport)> {
    let data = load_data(cfg)?;
    snapshot(cfg, &data)?;
    let (ck, ck_id) = Checkpoint::<f32>::load(checkpoint, Some(&cfg.reader_hash(&data.fingerprint)))?;
    let retrieval = load_retrieval(cfg, &data, split)?;
    let instances = data.split(split);
    let subsets = SubsetIndex::from_train(&data.train);

    instrument::reset();
    let preds = predict_split(&ck.reader, &data.kb, instances, &retrieval, &cfg.inference_config())?;
    let touched = instrument::counts();
    if touched != instrument::Counts::default() {
        return Err(Error::Contract(format!("inference path touched training-only machinery: {touched:?}")));
    }

    let records = score_predictions(instances, &preds, &subsets)?;
    let mut report = build_report(&records, split.as_str(), &cfg.config_hash(&data.fingerprint), &ck_id)?;
    report.entailment = entailment_accuracy(&ck.reader, &data.kb, instances, &labels(cfg, &data)?, &subsets)?;
    let dir = cfg.run_dir.join("reports");
    mkdir(&dir)?;
    let path = dir.join(format!("{}.json", split.as_str()));
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut pred_text = String::new();
    for r in &records {
        pred_text.push_str(&serde_json::to_string(r)?);
        pred_text.push('\n');
    }
    write_atomic(&dir.join(format!("{}.predictions.jsonl", split.as_str())), pred_text.as_bytes())?;
    Ok((path, report))
}

/// Comparison table over report files or run directories (which use
/// their `reports/dev.json`).
pub fn report_command(inputs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join("reports").join("dev.json") } else { p.clone() };
        let report: EvaluationReport = serde_json::from_str(&read(&file)?)?;
        let name = if p.is_dir() { p.file_name().map_or(p.display().to_string(), |n| n.to_string_lossy().into()) } else { p.display().to_string() };
        rows.push((name, report));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no reports given".into()));
    }
    Ok(render_table(&rows))
}
