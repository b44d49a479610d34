//! Rule retrieval for a (question, scenario) query.
//!
//! [`TfidfIndex`] is a sparse cosine baseline. [`DualEncoder`] is a small
//! trainable bag-of-embeddings model with separate query and document heads,
//! trained with the gold rule as positive and `m` random seen rules as
//! negatives.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Reduction};
use crate::corpus::{write_atomic, DatasetSplit, DialogueInstance, KnowledgeBase, RuleDocument, Subset, SubsetIndex};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{AdamW, AdamWConfig, ParamGroup, ParamId, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::text::{tokenize, Vocab};

/// Question and scenario joined by a space.
pub fn query_text(question: &str, scenario: &str) -> String {
    if scenario.trim().is_empty() {
        question.to_string()
    } else {
        format!("{question} {scenario}")
    }
}

pub fn instance_query(i: &DialogueInstance) -> String {
    query_text(&i.question, &i.scenario)
}

fn document_text(doc: &RuleDocument) -> String {
    format!("{} {}", doc.title, doc.body)
}

fn terms(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| t.chars().any(char::is_alphanumeric)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(doc_id, score)`, best first.
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.ranked.iter().position(|(id, _)| id == doc_id)
    }
}

/// Sort by score descending, ties by doc_id, and keep `k`.
fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> RetrievalResult {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    RetrievalResult { ranked: scored, k }
}

/// Anything that ranks the knowledge base for a query.
pub trait Retriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfIndex {
    doc_ids: Vec<String>,
    idf: BTreeMap<String, f64>,
    /// term -> (document index, normalized weight)
    postings: BTreeMap<String, Vec<(usize, f64)>>,
}

impl TfidfIndex {
    /// Index title and body of every document. Raw term counts, smoothed
    /// idf `ln((1 + N) / (1 + df)) + 1`, L2-normalized vectors.
    pub fn build(kb: &KnowledgeBase) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::EmptyInput("knowledge base".into()));
        }
        let docs: Vec<(String, BTreeMap<String, f64>)> = kb
            .documents()
            .map(|d| {
                let mut tf = BTreeMap::new();
                for t in terms(&document_text(d)) {
                    *tf.entry(t).or_insert(0.0) += 1.0;
                }
                (d.doc_id.clone(), tf)
            })
            .collect();
        let n = docs.len() as f64;
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for (_, tf) in &docs {
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0.0) += 1.0;
            }
        }
        let idf: BTreeMap<String, f64> =
            df.into_iter().map(|(t, d)| (t, ((1.0 + n) / (1.0 + d)).ln() + 1.0)).collect();
        let mut postings: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, (_, tf)) in docs.iter().enumerate() {
            let w: Vec<(&String, f64)> = tf.iter().map(|(t, c)| (t, c * idf[t])).collect();
            let norm = w.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
            for (t, x) in w {
                postings.entry(t.clone()).or_default().push((i, if norm > 0.0 { x / norm } else { 0.0 }));
            }
        }
        Ok(Self { doc_ids: docs.into_iter().map(|(id, _)| id).collect(), idf, postings })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Normalized tf-idf weights of a query; unknown terms are dropped.
    pub fn query_vector(&self, query: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in terms(query) {
            if self.idf.contains_key(&t) {
                *tf.entry(t).or_insert(0.0) += 1.0;
            }
        }
        let mut w: BTreeMap<String, f64> = tf.into_iter().map(|(t, c)| { let x = c * self.idf[&t]; (t, x) }).collect();
        let norm = w.values().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            w.values_mut().for_each(|x| *x /= norm);
        }
        w
    }
}

impl Retriever for TfidfIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for (t, q) in self.query_vector(query) {
            for &(i, d) in &self.postings[&t] {
                scores[i] += q * d;
            }
        }
        let scored = self.doc_ids.iter().cloned().zip(scores).collect();
        Ok(top_k(scored, k.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualEncoderConfig {
    pub embedding_dim: usize,
    /// Random seen negatives per positive.
    pub num_negatives: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Set from the global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self { embedding_dim: 64, num_negatives: 7, temperature: 1.0, steps: 300, batch_size: 16, learning_rate: 5e-3, seed: 0 }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::Config("retriever.num_negatives must be at least 1".into()));
        }
        if !crate::train::positive(self.temperature) {
            return Err(Error::Config("retriever.temperature must be positive".into()));
        }
        if self.embedding_dim == 0 || self.batch_size == 0 || !crate::train::positive(self.learning_rate) {
            return Err(Error::Config("retriever: embedding_dim, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEncoder<T> {
    pub config: DualEncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
    embedding: ParamId,
    query_head: ParamId,
    doc_head: ParamId,
    doc_ids: Vec<String>,
    /// Precomputed document vectors, one row per `doc_ids` entry.
    doc_matrix: Matrix<T>,
}

/// Per-step record of dual-encoder training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverLogEntry {
    pub step: usize,
    pub loss: f64,
}

impl<T: Scalar> DualEncoder<T> {
    /// Untrained encoder with identity heads over a vocabulary of the
    /// knowledge base and the training queries.
    pub fn new(kb: &KnowledgeBase, train: &DatasetSplit, config: DualEncoderConfig) -> Result<Self> {
        config.validate()?;
        let docs: Vec<String> = kb.documents().map(document_text).collect();
        let queries: Vec<String> = train.instances.iter().map(instance_query).collect();
        let vocab = Vocab::build(docs.iter().chain(&queries).map(String::as_str));
        let mut params = ParamStore::new();
        let mut rng = stream(config.seed, &["retriever", "init"]);
        let d = config.embedding_dim;
        let embedding = params.add("ret.emb", ParamGroup::Encoder, Matrix::random_uniform(vocab.len(), d, 1.0, &mut rng));
        let query_head = params.add("ret.query", ParamGroup::Encoder, Matrix::identity(d));
        let doc_head = params.add("ret.doc", ParamGroup::Encoder, Matrix::identity(d));
        let mut enc = Self {
            config,
            vocab,
            params,
            embedding,
            query_head,
            doc_head,
            doc_ids: kb.doc_ids().map(String::from).collect(),
            doc_matrix: Matrix::zeros(0, d),
        };
        enc.refresh_documents(kb)?;
        Ok(enc)
    }

    fn ids(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = terms(text).iter().map(|t| self.vocab.id(t)).collect();
        if ids.is_empty() {
            vec![self.vocab.id(crate::text::UNK)]
        } else {
            ids
        }
    }

    fn embed(&self, g: &mut Graph<'_, T>, text: &str, head: ParamId) -> crate::autograd::Var {
        let table = g.param(self.embedding);
        let e = g.embedding(table, &self.ids(text));
        let pooled = g.mean_rows(e);
        let w = g.param(head);
        g.linear(pooled, w, None)
    }

    /// Rebuild lookup tables after deserialization.
    pub fn after_load(&mut self) {
        self.vocab.reindex();
    }

    /// Recompute cached document vectors after a parameter change.
    pub fn refresh_documents(&mut self, kb: &KnowledgeBase) -> Result<()> {
        let mut g = Graph::new(&self.params);
        let mut rows = Vec::with_capacity(kb.len());
        for doc in kb.documents() {
            let v = self.embed(&mut g, &document_text(doc), self.doc_head);
            rows.push(g.value(v).data().to_vec());
        }
        self.doc_matrix = Matrix::from_rows(&rows);
        self.doc_ids = kb.doc_ids().map(String::from).collect();
        Ok(())
    }

    /// Softmax cross-entropy of `positive` among `[positive] ++ negatives`
    /// for one query, as a tape node.
    fn instance_loss(
        &self,
        g: &mut Graph<'_, T>,
        query: &str,
        positive: &RuleDocument,
        negatives: &[&RuleDocument],
    ) -> crate::autograd::Var {
        let q = self.embed(g, query, self.query_head);
        let mut docs = vec![self.embed(g, &document_text(positive), self.doc_head)];
        docs.extend(negatives.iter().map(|n| self.embed(g, &document_text(n), self.doc_head)));
        let d = g.concat_rows(&docs);
        let s = g.matmul_t(q, d);
        let s = g.scale(s, T::from_f64_lossy(1.0 / self.config.temperature));
        g.cross_entropy(s, &[0], Reduction::Mean)
    }

    /// Train in place; returns the per-step mean batch loss.
    pub fn train(&mut self, kb: &KnowledgeBase, train: &DatasetSplit) -> Result<Vec<RetrieverLogEntry>> {
        let seen: Vec<&str> = kb.seen_ids().iter().map(String::as_str).collect();
        if self.config.num_negatives >= seen.len() {
            return Err(Error::Config(format!(
                "retriever.num_negatives = {} must be below the seen knowledge base size {}",
                self.config.num_negatives,
                seen.len()
            )));
        }
        if train.is_empty() {
            return Err(Error::EmptyInput("retriever training split".into()));
        }
        let mut opt = AdamW::new(&self.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let lr = self.config.learning_rate;
        let mut log = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let mut rng = stream(self.config.seed, &["retriever", "step", &step.to_string()]);
            let mut grads = ParamGrads::zeros_like(&self.params);
            let mut total = 0.0;
            for _ in 0..self.config.batch_size {
                let inst = &train.instances[rng.gen_range(0..train.len())];
                let gold = kb.get(&inst.gold_doc_id).ok_or_else(|| Error::DanglingDoc {
                    utterance_id: inst.utterance_id.clone(),
                    doc_id: inst.gold_doc_id.clone(),
                })?;
                let pool: Vec<&str> = seen.iter().copied().filter(|&id| id != gold.doc_id).collect();
                let negatives: Vec<&RuleDocument> = pool
                    .choose_multiple(&mut rng, self.config.num_negatives)
                    .map(|id| kb.get(id).expect("seen id is in the knowledge base"))
                    .collect();
                let mut g = Graph::new(&self.params);
                let loss = self.instance_loss(&mut g, &instance_query(inst), gold, &negatives);
                total += g.scalar(loss).to_f64_lossy();
                g.backward(loss, &mut grads);
            }
            let b = self.config.batch_size as f64;
            grads.scale(T::from_f64_lossy(1.0 / b));
            if !grads.all_finite() || !(total / b).is_finite() {
                return Err(Error::NonFinite { step, detail: "retriever loss or gradient".into() });
            }
            opt.step(&mut self.params, &grads, |_| lr);
            log.push(RetrieverLogEntry { step, loss: total / b });
        }
        self.refresh_documents(kb)?;
        Ok(log)
    }

    /// Mean loss over a fixed set of (query, positive, negatives) triples.
    pub fn fixed_batch_loss(&self, batch: &[(String, &RuleDocument, Vec<&RuleDocument>)]) -> f64 {
        let mut total = 0.0;
        for (q, p, n) in batch {
            let mut g = Graph::new(&self.params);
            let l = self.instance_loss(&mut g, q, p, n);
            total += g.scalar(l).to_f64_lossy();
        }
        total / batch.len().max(1) as f64
    }
}

impl<T: Scalar> Retriever for DualEncoder<T> {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        let mut g = Graph::new(&self.params);
        let q = self.embed(&mut g, query, self.query_head);
        let q = g.value(q).clone();
        let s = q.matmul(&self.doc_matrix.transpose());
        let inv_t = 1.0 / self.config.temperature;
        let scored =
            self.doc_ids.iter().cloned().zip(s.data().iter().map(|x| x.to_f64_lossy() * inv_t)).collect();
        Ok(top_k(scored, k.max(1)))
    }
}

/// Retrieve for every instance of a split.
pub fn retrieve_split(
    retriever: &dyn Retriever,
    split: &DatasetSplit,
    k: usize,
) -> Result<BTreeMap<String, RetrievalResult>> {
    split
        .instances
        .iter()
        .map(|i| Ok((i.utterance_id.clone(), retriever.retrieve(&instance_query(i), k)?)))
        .collect()
}

pub const REPORT_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKAccuracy {
    pub count: usize,
    /// k -> percentage of instances with gold in the first k ranks
    pub accuracy: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub overall: TopKAccuracy,
    pub per_subset: BTreeMap<String, TopKAccuracy>,
}

pub fn evaluate_retrieval(
    results: &BTreeMap<String, RetrievalResult>,
    split: &DatasetSplit,
    subsets: &SubsetIndex,
) -> Result<RetrievalReport> {
    let mut hits: BTreeMap<Option<Subset>, (usize, [usize; 4])> = BTreeMap::new();
    for inst in &split.instances {
        let r = results
            .get(&inst.utterance_id)
            .ok_or_else(|| Error::MissingRetrieval(inst.utterance_id.clone()))?;
        let rank = r.rank_of(&inst.gold_doc_id);
        for key in [None, Some(subsets.subset(inst))] {
            let e = hits.entry(key).or_insert((0, [0; 4]));
            e.0 += 1;
            for (j, &k) in REPORT_KS.iter().enumerate() {
                e.1[j] += usize::from(rank.is_some_and(|r| r < k));
            }
        }
    }
    let table = |(n, h): (usize, [usize; 4])| TopKAccuracy {
        count: n,
        accuracy: REPORT_KS
            .iter()
            .zip(h)
            .map(|(&k, c)| (k, if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 }))
            .collect(),
    };
    let overall = table(hits.get(&None).copied().unwrap_or((0, [0; 4])));
    let per_subset = [Subset::Seen, Subset::Unseen]
        .into_iter()
        .map(|s| (s.as_str().to_string(), table(hits.get(&Some(s)).copied().unwrap_or((0, [0; 4])))))
        .collect();
    Ok(RetrievalReport { overall, per_subset })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    config_hash: String,
    utterance_id: String,
    ranked: Vec<(String, f64)>,
}

/// Write one JSON line per utterance.
pub fn save_cache(path: &Path, config_hash: &str, results: &BTreeMap<String, RetrievalResult>) -> Result<()> {
    let mut out = String::new();
    for (id, r) in results {
        let rec = CacheRecord { config_hash: config_hash.into(), utterance_id: id.clone(), ranked: r.ranked.clone() };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Load a cache, rejecting records produced under a different config.
pub fn load_cache(path: &Path, expected_hash: &str) -> Result<BTreeMap<String, RetrievalResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if rec.config_hash != expected_hash {
            return Err(Error::StaleCache {
                path: path.to_path_buf(),
                expected: expected_hash.into(),
                found: rec.config_hash,
            });
        }
        let k = rec.ranked.len().max(1);
        out.insert(rec.utterance_id, RetrievalResult { ranked: rec.ranked, k });
    }
    Ok(out)
}

/// Vocabulary-overlap score used only by tests as an independent oracle.
#[doc(hidden)]
pub fn term_counts(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for t in terms(text) {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}
