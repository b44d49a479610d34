//! Joint optimization of the answer loss and the activated entailment loss.
//!
//! Each step draws one fusion sample per instance, encodes every candidate
//! with the shared encoder, and backpropagates
//! `l_answer + lambda * l_entail` where `l_answer` is the batch mean of the
//! summed token NLL and `l_entail` is the mean, over instances whose sample
//! contains the gold rule, of the per-EDU cross-entropy on that rule.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Reduction, Var};
use crate::corpus::{DatasetSplit, DialogueInstance, KnowledgeBase, SubsetIndex};
use crate::entail::EntailmentLabelSequence;
use crate::error::{Error, Result};
use crate::eval::{decision_metrics, predict_split, score_predictions, InferenceConfig};
use crate::fusion::{build_pool, sample_step, CandidatePool, FusionConfig, FusionSample};
use crate::model::{build_input, ContextualizedInput, Mode, Reader};
use crate::params::{AdamW, AdamWConfig, ParamGroup};
use crate::retrieval::RetrievalResult;
use crate::rng::stream;
use crate::scalar::Scalar;

/// Cumulative ablations: `s` drops the random pool members, `a` the
/// entailment loss, `i` the order shuffle and `f` fusion (top-1 only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub rd_pool: bool,
    pub entailment_loss: bool,
    pub shuffle: bool,
    pub fusion: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { rd_pool: true, entailment_loss: true, shuffle: true, fusion: true }
    }
}

impl Ablation {
    /// Parse `s`, `s+a`, `s+a+i` or `s+a+i+f`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut a = Self::default();
        for part in spec.split('+') {
            match part.trim() {
                "s" => a.rd_pool = false,
                "a" => a.entailment_loss = false,
                "i" => a.shuffle = false,
                "f" => a.fusion = false,
                other => {
                    return Err(Error::Config(format!("unknown ablation `{other}`; expected one of s, a, i, f")))
                }
            }
        }
        Ok(a)
    }

    /// Fusion settings after ablation.
    pub fn apply(&self, fusion: &FusionConfig) -> FusionConfig {
        let mut f = fusion.clone();
        if !self.rd_pool {
            f.num_random = 0;
        }
        if !self.shuffle {
            f.shuffle = false;
        }
        if !self.fusion {
            f.k = 1;
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub lr_backbone: f64,
    pub lr_entailment_decoder: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_epochs: usize,
    /// Evaluate on dev every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub patience: usize,
    /// Set from the global seed.
    #[serde(skip)]
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            lr_backbone: 2e-4,
            lr_entailment_decoder: 2e-5,
            warmup_steps: 0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 8,
            max_steps: 5000,
            max_epochs: 20,
            eval_every: 0,
            patience: 3,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("training.lambda = {} must lie in [0, 1]", self.lambda)));
        }
        if !positive(self.lr_backbone) || !positive(self.lr_entailment_decoder) {
            return Err(Error::Config("training learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the entailment term is computed at all.
    pub fn entailment_active(&self) -> bool {
        self.ablation.entailment_loss && self.lambda > 0.0
    }

    /// Learning rate of a group at `step` (0-based), with linear warmup.
    pub fn lr(&self, group: ParamGroup, step: usize) -> f64 {
        let base = match group {
            ParamGroup::EntailmentDecoder => self.lr_entailment_decoder,
            ParamGroup::Encoder | ParamGroup::AnswerDecoder => self.lr_backbone,
        };
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_answer: f64,
    pub l_entail: f64,
    pub l_total: f64,
}

/// False for NaN as well as for non-positive values.
pub(crate) fn positive(x: f64) -> bool {
    x > 0.0
}

pub fn combined_loss(l_answer: f64, l_entail: f64, lambda: f64) -> f64 {
    l_answer + lambda * l_entail
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub l_answer: f64,
    pub l_entail: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Summed token NLL of `target` given the fused candidates (graph node).
pub fn answer_loss<T: Scalar>(reader: &Reader<T>, g: &mut Graph<'_, T>, memory: &crate::model::CrossMemory, target: &[usize]) -> Result<Var> {
    reader.answer_loss(g, memory, target)
}

/// Mean per-EDU cross-entropy of entailment logits against labels.
pub fn entailment_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[crate::entail::EntailmentLabel]) -> Result<Var> {
    let rows = g.value(logits).rows();
    if rows != labels.len() {
        return Err(Error::Shape(format!("{rows} entailment rows but {} labels", labels.len())));
    }
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    Ok(g.cross_entropy(logits, &targets, Reduction::Mean))
}

/// Everything one instance contributes to a step.
pub struct StepItem<'a> {
    pub instance: &'a DialogueInstance,
    pub sample: FusionSample,
    pub labels: Option<&'a EntailmentLabelSequence>,
}

fn step_inputs<T: Scalar>(reader: &Reader<T>, kb: &KnowledgeBase, item: &StepItem<'_>) -> Result<Vec<ContextualizedInput>> {
    item.sample
        .candidate_ids
        .iter()
        .enumerate()
        .map(|(pos, id)| {
            let doc = kb.get(id).ok_or_else(|| Error::DanglingDoc {
                utterance_id: item.instance.utterance_id.clone(),
                doc_id: id.clone(),
            })?;
            build_input(doc, item.instance.into(), &reader.vocab, reader.config.max_input_len, item.sample.gold_position == Some(pos))
        })
        .collect()
}

/// Forward and backward one batch, accumulating gradients of
/// `l_answer + lambda * l_entail` into `grads`.
pub fn batch_gradients<T: Scalar>(
    reader: &Reader<T>,
    kb: &KnowledgeBase,
    batch: &[StepItem<'_>],
    cfg: &TrainingConfig,
    grads: &mut ParamGrads<T>,
) -> Result<LossBreakdown> {
    let entail_on = cfg.entailment_active();
    let with_entail: Vec<bool> =
        batch.iter().map(|b| entail_on && b.sample.gold_position.is_some() && b.labels.is_some()).collect();
    let n_answer = batch.len() as f64;
    let n_entail = with_entail.iter().filter(|&&x| x).count() as f64;
    let (mut sum_answer, mut sum_entail) = (0.0, 0.0);
    for (item, &entail) in batch.iter().zip(&with_entail) {
        let inputs = step_inputs(reader, kb, item)?;
        let mut g = Graph::new(&reader.params);
        let (encoded, fused) = reader.encode_and_fuse(&mut g, &inputs)?;
        let memory = reader.cross_memory(&mut g, &fused);
        let la = reader.answer_loss(&mut g, &memory, &reader.target_ids(&item.instance.gold_answer))?;
        sum_answer += g.scalar(la).to_f64_lossy();
        let mut root = g.scale(la, T::from_f64_lossy(1.0 / n_answer));
        if entail {
            let pos = item.sample.gold_position.expect("checked above");
            let labels = &item.labels.expect("checked above").labels;
            let kept = inputs[pos].edu_marker_positions.len();
            let logits = reader.entailment_forward(&mut g, encoded[pos].sentence, Mode::Train, true)?;
            let le = entailment_loss(&mut g, logits, &labels[..kept.min(labels.len())])?;
            sum_entail += g.scalar(le).to_f64_lossy();
            let scaled = g.scale(le, T::from_f64_lossy(cfg.lambda / n_entail));
            root = g.add(root, scaled);
        }
        g.backward(root, grads);
    }
    let l_answer = sum_answer / n_answer;
    let l_entail = if n_entail > 0.0 { sum_entail / n_entail } else { 0.0 };
    Ok(LossBreakdown { l_answer, l_entail, l_total: combined_loss(l_answer, l_entail, cfg.lambda) })
}

/// Loss of a batch without touching parameters.
pub fn batch_loss<T: Scalar>(reader: &Reader<T>, kb: &KnowledgeBase, batch: &[StepItem<'_>], cfg: &TrainingConfig) -> Result<LossBreakdown> {
    let mut scratch = ParamGrads::zeros_like(&reader.params);
    batch_gradients(reader, kb, batch, cfg, &mut scratch)
}

/// Optimizer state plus step counter.
pub struct Trainer<T> {
    pub optimizer: AdamW<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(reader: &Reader<T>, cfg: &TrainingConfig) -> Self {
        let opt = AdamWConfig { weight_decay: cfg.weight_decay, clip_norm: cfg.clip_norm, ..Default::default() };
        Self { optimizer: AdamW::new(&reader.params, opt), step: 0 }
    }

    /// One optimization step on `batch`.
    pub fn train_step(
        &mut self,
        reader: &mut Reader<T>,
        kb: &KnowledgeBase,
        batch: &[StepItem<'_>],
        cfg: &TrainingConfig,
    ) -> Result<LossBreakdown> {
        let mut grads = ParamGrads::zeros_like(&reader.params);
        let losses = batch_gradients(reader, kb, batch, cfg, &mut grads)?;
        if !losses.l_total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "l_answer = {}, l_entail = {}, gradients finite = {}",
                    losses.l_answer,
                    losses.l_entail,
                    grads.all_finite()
                ),
            });
        }
        let step = self.step;
        self.optimizer.step(&mut reader.params, &grads, |g| cfg.lr(g, step));
        self.step += 1;
        Ok(losses)
    }
}

/// Dev data used for model selection.
pub struct DevSet<'a> {
    pub split: &'a DatasetSplit,
    pub retrieval: &'a BTreeMap<String, RetrievalResult>,
    pub subsets: &'a SubsetIndex,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub dev_micro: f64,
}

pub struct TrainOutcome<T> {
    /// Parameters at the best dev evaluation (or the last step without dev).
    pub reader: Reader<T>,
    pub log: Vec<LogEntry>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
}

/// Dev micro accuracy of the current parameters.
pub fn dev_micro<T: Scalar>(reader: &Reader<T>, kb: &KnowledgeBase, dev: &DevSet<'_>) -> Result<f64> {
    let preds = predict_split(reader, kb, dev.split, dev.retrieval, &dev.inference)?;
    let records = score_predictions(dev.split, &preds, dev.subsets)?;
    Ok(decision_metrics(&records)?.micro)
}

/// Build every training pool for one epoch.
pub fn epoch_pools(
    train: &DatasetSplit,
    kb: &KnowledgeBase,
    retrieval: &BTreeMap<String, RetrievalResult>,
    fusion: &FusionConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<CandidatePool>> {
    let e = epoch.to_string();
    train
        .instances
        .iter()
        .map(|inst| {
            let ranked = retrieval
                .get(&inst.utterance_id)
                .ok_or_else(|| Error::MissingRetrieval(inst.utterance_id.clone()))?;
            let mut rng = stream(seed, &["pool", &inst.utterance_id, &e]);
            build_pool(inst, ranked, kb, fusion.top_relevant, fusion.num_random, &mut rng)
        })
        .collect()
}

/// Run training. `log_sink` receives every step's entry as it happens.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    mut reader: Reader<T>,
    kb: &KnowledgeBase,
    train: &DatasetSplit,
    retrieval: &BTreeMap<String, RetrievalResult>,
    labels: &BTreeMap<String, EntailmentLabelSequence>,
    fusion: &FusionConfig,
    cfg: &TrainingConfig,
    dev: Option<&DevSet<'_>>,
    mut log_sink: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    fusion.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split".into()));
    }
    let fusion = cfg.ablation.apply(fusion);
    let mut trainer = Trainer::new(&reader, cfg);
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, usize, Reader<T>)> = None;
    let mut since_best = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        if trainer.step >= cfg.max_steps {
            break;
        }
        let pools = epoch_pools(train, kb, retrieval, &fusion, cfg.seed, epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &["order", &epoch.to_string()]));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, chunk) in batches.iter().enumerate() {
            if trainer.step >= cfg.max_steps {
                break 'epochs;
            }
            let step_label = trainer.step.to_string();
            let items: Vec<StepItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let inst = &train.instances[i];
                    let mut rng = stream(cfg.seed, &["sample", &inst.utterance_id, &epoch.to_string(), &step_label]);
                    StepItem {
                        instance: inst,
                        sample: sample_step(&pools[i], fusion.k, fusion.force_gold, fusion.shuffle, &mut rng),
                        labels: labels.get(&inst.utterance_id),
                    }
                })
                .collect();
            let lr = cfg.lr(ParamGroup::Encoder, trainer.step);
            let losses = trainer.train_step(&mut reader, kb, &items, cfg)?;
            let entry = LogEntry { step: trainer.step, l_answer: losses.l_answer, l_entail: losses.l_entail, l_total: losses.l_total, lr };
            log_sink(&entry)?;
            log.push(entry);
            let end_of_epoch = b + 1 == batches.len();
            let due = if cfg.eval_every == 0 { end_of_epoch } else { trainer.step.is_multiple_of(cfg.eval_every) };
            if let (Some(dev), true) = (dev, due) {
                let micro = dev_micro(&reader, kb, dev)?;
                log::info!("step {}: dev micro {micro:.2}", trainer.step);
                evals.push(EvalPoint { step: trainer.step, dev_micro: micro });
                if best.as_ref().is_none_or(|(m, _, _)| micro > *m) {
                    best = Some((micro, trainer.step, reader.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }
    let (reader, best_step) = match best {
        Some((_, step, r)) => (r, step),
        None => (reader, trainer.step),
    };
    Ok(TrainOutcome { reader, log, evals, best_step })
}

/// Serialize log entries as JSON Lines.
pub fn write_log(out: &mut impl Write, entry: &LogEntry) -> Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n").map_err(|e| Error::io(std::path::Path::new("<training log>"), e))
}
