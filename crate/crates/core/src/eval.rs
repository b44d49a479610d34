//! Decision accuracy, question-generation F1_BLEU and the evaluation report.
//!
//! BLEU here is sentence level over [`tokenize`] output (case-folded, each
//! punctuation mark a token), with uniform weights up to `max_n`, the usual
//! brevity penalty and add-one smoothing of a zero n-gram match count for
//! `n >= 2`. An empty candidate scores 0.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{decision_class, DatasetSplit, Decision, KnowledgeBase, Subset, SubsetIndex};
use crate::entail::{EntailmentLabel, EntailmentLabelSequence};
use crate::error::{Error, Result};
use crate::fusion::inference_candidates;
use crate::model::{build_input, parse_decision, DialogueContext, GenerationResult, Mode, Reader};
use crate::retrieval::RetrievalResult;
use crate::scalar::Scalar;
use crate::text::tokenize;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU of token sequences.
pub fn bleu_tokens(candidate: &[String], reference: &[String], max_n: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngrams(candidate, n);
        let refs = ngrams(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    bleu_tokens(&tokenize(candidate), &tokenize(reference), max_n)
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub utterance_id: String,
    pub predicted: GenerationResult,
    pub gold_decision: Decision,
    pub gold_question: Option<String>,
    pub subset: Subset,
}

/// Harmonic mean of BLEU precision over the `M` predicted-Inquire records
/// and BLEU recall over the `N` gold-Inquire records. Returns
/// `(f1, precision, recall, M, N)`; 0 whenever M, N or p + r is 0.
pub fn f1_bleu_parts(records: &[PredictionRecord], max_n: usize) -> (f64, f64, f64, usize, usize) {
    let score = |r: &PredictionRecord| match (&r.predicted.follow_up, &r.gold_question) {
        (Some(p), Some(g)) if r.predicted.decision == Decision::Inquire => bleu(p, g, max_n),
        _ => 0.0,
    };
    let predicted: Vec<&PredictionRecord> =
        records.iter().filter(|r| r.predicted.decision == Decision::Inquire).collect();
    let gold: Vec<&PredictionRecord> = records.iter().filter(|r| r.gold_decision == Decision::Inquire).collect();
    let (m, n) = (predicted.len(), gold.len());
    if m == 0 || n == 0 {
        return (0.0, 0.0, 0.0, m, n);
    }
    let p = predicted.iter().map(|r| score(r)).sum::<f64>() / m as f64;
    let r = gold.iter().map(|r| score(r)).sum::<f64>() / n as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (f1, p, r, m, n)
}

pub fn f1_bleu(records: &[PredictionRecord], max_n: usize) -> f64 {
    f1_bleu_parts(records, max_n).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionMetrics {
    pub total: usize,
    pub correct: usize,
    pub micro: f64,
    pub macro_: f64,
    /// Class name -> accuracy, for classes present in the gold labels.
    pub classwise: BTreeMap<String, f64>,
}

pub fn decision_metrics(records: &[PredictionRecord]) -> Result<DecisionMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction records".into()));
    }
    let mut per: BTreeMap<Decision, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for r in records {
        let ok = r.predicted.decision == r.gold_decision;
        correct += usize::from(ok);
        let e = per.entry(r.gold_decision).or_insert((0, 0));
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    let classwise: BTreeMap<String, f64> =
        per.iter().map(|(d, (c, n))| (d.as_str().to_string(), 100.0 * *c as f64 / *n as f64)).collect();
    let macro_ = classwise.values().sum::<f64>() / classwise.len() as f64;
    Ok(DecisionMetrics {
        total: records.len(),
        correct,
        micro: 100.0 * correct as f64 / records.len() as f64,
        macro_,
        classwise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub decisions: DecisionMetrics,
    pub f1_bleu1: f64,
    pub f1_bleu4: f64,
    /// Number of predicted Inquire decisions.
    pub inquire_predicted: usize,
    /// Number of gold Inquire decisions.
    pub inquire_gold: usize,
    /// Generations that fell back to a bare decision.
    pub fallbacks: usize,
}

pub fn metrics(records: &[PredictionRecord]) -> Result<Metrics> {
    let decisions = decision_metrics(records)?;
    let (f1_bleu1, _, _, m, n) = f1_bleu_parts(records, 1);
    Ok(Metrics {
        decisions,
        f1_bleu1,
        f1_bleu4: f1_bleu(records, 4),
        inquire_predicted: m,
        inquire_gold: n,
        fallbacks: records.iter().filter(|r| r.predicted.fallback).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl EntailmentAccuracy {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub config_hash: String,
    pub checkpoint_id: String,
    /// How instances were assigned to the seen/unseen subsets.
    pub subset_rule: String,
    pub overall: Metrics,
    /// Only subsets with at least one instance appear.
    pub per_subset: BTreeMap<String, Metrics>,
    /// Per-EDU accuracy of the entailment head on the gold rule, overall
    /// and per subset, when labels were supplied.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub entailment: BTreeMap<String, EntailmentAccuracy>,
}

/// Pair predictions with gold decisions.
pub fn score_predictions(
    split: &DatasetSplit,
    predictions: &BTreeMap<String, GenerationResult>,
    subsets: &SubsetIndex,
) -> Result<Vec<PredictionRecord>> {
    split
        .instances
        .iter()
        .map(|inst| {
            let predicted = predictions
                .get(&inst.utterance_id)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no prediction for `{}`", inst.utterance_id)))?;
            let gold_decision = decision_class(inst);
            let gold_question = parse_decision(&inst.gold_answer).1;
            Ok(PredictionRecord {
                utterance_id: inst.utterance_id.clone(),
                predicted,
                gold_decision,
                gold_question,
                subset: subsets.subset(inst),
            })
        })
        .collect()
}

pub const SUBSET_RULE: &str = "seen iff the gold rule is the gold rule of some training instance";

pub fn build_report(records: &[PredictionRecord], split: &str, config_hash: &str, checkpoint_id: &str) -> Result<EvaluationReport> {
    let overall = metrics(records)?;
    let mut per_subset = BTreeMap::new();
    for s in [Subset::Seen, Subset::Unseen] {
        let part: Vec<PredictionRecord> = records.iter().filter(|r| r.subset == s).cloned().collect();
        if !part.is_empty() {
            per_subset.insert(s.as_str().to_string(), metrics(&part)?);
        }
    }
    Ok(EvaluationReport {
        split: split.into(),
        config_hash: config_hash.into(),
        checkpoint_id: checkpoint_id.into(),
        subset_rule: SUBSET_RULE.into(),
        overall,
        per_subset,
        entailment: BTreeMap::new(),
    })
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub k: usize,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { k: 5, beam_size: 5, max_len: 64 }
    }
}

/// Answer one dialogue from its retrieved rules. Sees no gold information.
pub fn predict_one<T: Scalar>(
    reader: &Reader<T>,
    kb: &KnowledgeBase,
    ctx: DialogueContext<'_>,
    ranked: &RetrievalResult,
    cfg: &InferenceConfig,
) -> Result<GenerationResult> {
    let sample = inference_candidates(ranked, cfg.k);
    let inputs = sample
        .candidate_ids
        .iter()
        .map(|id| {
            let doc = kb.get(id).ok_or_else(|| Error::DanglingDoc { utterance_id: ctx.utterance_id.into(), doc_id: id.clone() })?;
            build_input(doc, ctx, &reader.vocab, reader.config.max_input_len, false)
        })
        .collect::<Result<Vec<_>>>()?;
    reader.generate(&inputs, cfg.beam_size, cfg.max_len)
}

/// Predict every instance of `split` from its cached retrieval.
pub fn predict_split<T: Scalar>(
    reader: &Reader<T>,
    kb: &KnowledgeBase,
    split: &DatasetSplit,
    retrieval: &BTreeMap<String, RetrievalResult>,
    cfg: &InferenceConfig,
) -> Result<BTreeMap<String, GenerationResult>> {
    split
        .instances
        .iter()
        .map(|inst| {
            let ranked = retrieval
                .get(&inst.utterance_id)
                .ok_or_else(|| Error::MissingRetrieval(inst.utterance_id.clone()))?;
            Ok((inst.utterance_id.clone(), predict_one(reader, kb, inst.into(), ranked, cfg)?))
        })
        .collect()
}

/// Argmax labels of the entailment head on the gold rule of one instance.
/// A diagnostic probe: it reads the gold rule and is never part of
/// answer prediction.
pub fn probe_entailment<T: Scalar>(
    reader: &Reader<T>,
    kb: &KnowledgeBase,
    inst: &crate::corpus::DialogueInstance,
) -> Result<Vec<EntailmentLabel>> {
    let doc = kb.get(&inst.gold_doc_id).ok_or_else(|| Error::DanglingDoc {
        utterance_id: inst.utterance_id.clone(),
        doc_id: inst.gold_doc_id.clone(),
    })?;
    let input = build_input(doc, inst.into(), &reader.vocab, reader.config.max_input_len, true)?;
    let mut g = Graph::new(&reader.params);
    let enc = reader.encode(&mut g, &input)?;
    let logits = reader.entailment_forward(&mut g, enc.sentence, Mode::Train, true)?;
    let l = g.value(logits);
    Ok((0..l.rows())
        .map(|i| {
            let row = l.row(i);
            let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            EntailmentLabel::from_index(best)
        })
        .collect())
}

/// Per-EDU accuracy of [`probe_entailment`] against `labels`, overall and
/// per subset.
pub fn entailment_accuracy<T: Scalar>(
    reader: &Reader<T>,
    kb: &KnowledgeBase,
    split: &DatasetSplit,
    labels: &BTreeMap<String, EntailmentLabelSequence>,
    subsets: &SubsetIndex,
) -> Result<BTreeMap<String, EntailmentAccuracy>> {
    let mut out: BTreeMap<String, EntailmentAccuracy> = BTreeMap::new();
    for inst in &split.instances {
        let Some(gold) = labels.get(&inst.utterance_id) else { continue };
        let pred = probe_entailment(reader, kb, inst)?;
        let correct = pred.iter().zip(&gold.labels).filter(|(a, b)| a == b).count();
        let total = pred.len().min(gold.labels.len());
        for key in ["overall", subsets.subset(inst).as_str()] {
            let e = out.entry(key.to_string()).or_insert(EntailmentAccuracy { correct: 0, total: 0 });
            e.correct += correct;
            e.total += total;
        }
    }
    Ok(out)
}

/// Plain-text comparison table of several reports.
pub fn render_table(rows: &[(String, EvaluationReport)]) -> String {
    let mut out = format!(
        "{:<28} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>5} {:>5}\n",
        "run", "micro", "macro", "seen", "unseen", "F1-B1", "F1-B4", "M", "N"
    );
    for (name, r) in rows {
        let sub = |s: &str| r.per_subset.get(s).map_or("-".to_string(), |m| format!("{:.1}", m.decisions.micro));
        out.push_str(&format!(
            "{:<28} {:>7.1} {:>7.1} {:>7} {:>7} {:>8.3} {:>8.3} {:>5} {:>5}\n",
            name,
            r.overall.decisions.micro,
            r.overall.decisions.macro_,
            sub("seen"),
            sub("unseen"),
            r.overall.f1_bleu1,
            r.overall.f1_bleu4,
            r.overall.inquire_predicted,
            r.overall.inquire_gold
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(text: &str) -> GenerationResult {
        let (decision, follow_up) = parse_decision(text);
        GenerationResult { text: text.into(), decision, follow_up, score: 0.0, tokens: vec![], fallback: false }
    }

    fn rec(pred: &str, gold: &str) -> PredictionRecord {
        let (gold_decision, gold_question) = parse_decision(gold);
        PredictionRecord { utterance_id: String::new(), predicted: gen(pred), gold_decision, gold_question, subset: Subset::Seen }
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(bleu("are you over 65?", "are you over 65?", 4), 1.0);
        assert_eq!(bleu("yes", "yes", 4), 1.0);
        assert_eq!(bleu("red blue", "green cat", 1), 0.0);
        assert_eq!(bleu("", "a b", 4), 0.0);
    }

    #[test]
    fn bleu_six_token_fixture() {
        // candidate: the cat sat on the mat   reference: the cat is on the mat
        // p1 = 5/6 (the x2, cat, on, mat); p2: bigrams the-cat, on-the, the-mat match = 3/5
        // p3: "on the mat" matches = 1/4; p4: 0 matches -> 1/(3+1)
        // equal lengths -> BP = 1
        let expected = ((5.0f64 / 6.0).ln() + (3.0f64 / 5.0).ln() + (1.0f64 / 4.0).ln() + (1.0f64 / 4.0).ln()) / 4.0;
        let got = bleu("the cat sat on the mat", "the cat is on the mat", 4);
        assert!((got - expected.exp()).abs() < 1e-12);
        // brevity: "the cat" vs 6-token reference, max_n 1: p1 = 1, BP = e^(1 - 3)
        assert!((bleu("the cat", "the cat is on the mat", 1) - (-2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn decision_fixture() {
        let records = [rec("Yes", "Yes"), rec("No", "Yes"), rec("No", "No"), rec("are you ok?", "are you ok?")];
        let m = decision_metrics(&records).unwrap();
        assert_eq!(m.micro, 75.0);
        assert_eq!(m.classwise["Yes"], 50.0);
        assert_eq!(m.classwise["No"], 100.0);
        assert_eq!(m.classwise["Inquire"], 100.0);
        assert!((m.macro_ - 83.33).abs() < 0.01);
        assert!(decision_metrics(&[]).is_err());
    }

    #[test]
    fn f1_degenerate_and_perfect() {
        let none = [rec("Yes", "are you ok?"), rec("No", "No")];
        assert_eq!(f1_bleu(&none, 4), 0.0);
        let no_gold = [rec("are you ok?", "Yes")];
        assert_eq!(f1_bleu(&no_gold, 4), 0.0);
        let perfect = [rec("are you ok?", "are you ok?"), rec("Yes", "Yes")];
        assert_eq!(f1_bleu(&perfect, 1), 1.0);
        assert_eq!(f1_bleu(&perfect, 4), 1.0);
    }

    #[test]
    fn f1_mixed_fixture() {
        let records = [
            rec("are you over 65?", "are you over 65?"),
            rec("do you live in wales?", "do you live in scotland?"),
            rec("are you a farmer?", "Yes"),
            rec("No", "are you disabled?"),
        ];
        let b2 = bleu("do you live in wales?", "do you live in scotland?", 4);
        let p = (1.0 + b2 + 0.0) / 3.0;
        let r = (1.0 + b2 + 0.0) / 3.0;
        let (f1, pp, rr, m, n) = f1_bleu_parts(&records, 4);
        assert_eq!((m, n), (3, 3));
        assert!((pp - p).abs() < 1e-12 && (rr - r).abs() < 1e-12);
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }
}
