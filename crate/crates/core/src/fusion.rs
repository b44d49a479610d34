//! Relevance-diversity candidate pools and per-step candidate sampling.
//!
//! For training, each instance gets a pool of its top retrieved rules plus
//! rules drawn at random from the seen knowledge base, with the gold rule
//! always a member. Every step draws `k` candidates from the pool and
//! (optionally) shuffles their order. Inference uses the top-`k` retrieved
//! rules in rank order and never sees the gold rule.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueInstance, KnowledgeBase};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub k: usize,
    pub top_relevant: usize,
    pub num_random: usize,
    pub force_gold: bool,
    pub shuffle: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { k: 5, top_relevant: 20, num_random: 30, force_gold: true, shuffle: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("fusion.k must be at least 1".into()));
        }
        if self.top_relevant == 0 {
            return Err(Error::Config("fusion.top_relevant must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub utterance_id: String,
    pub relevant_ids: Vec<String>,
    pub random_ids: Vec<String>,
    pub gold_id: String,
}

impl CandidatePool {
    /// `relevant ∪ random ∪ {gold}` without duplicates, in that order.
    pub fn members(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.relevant_ids
            .iter()
            .chain(&self.random_ids)
            .chain(std::iter::once(&self.gold_id))
            .map(String::as_str)
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSample {
    pub candidate_ids: Vec<String>,
    pub gold_position: Option<usize>,
    pub shuffled: bool,
}

/// Build the training pool of one instance. `ranked` is the instance's
/// retrieval output; `num_random` extra rules are drawn from the seen
/// knowledge base, excluding already-relevant ones.
pub fn build_pool(
    instance: &DialogueInstance,
    ranked: &RetrievalResult,
    kb: &KnowledgeBase,
    top_relevant: usize,
    num_random: usize,
    rng: &mut impl Rng,
) -> Result<CandidatePool> {
    if kb.seen_ids().is_empty() {
        return Err(Error::EmptyInput("seen knowledge base".into()));
    }
    instrument::record_gold_access();
    let relevant_ids: Vec<String> = ranked.ranked.iter().take(top_relevant).map(|(id, _)| id.clone()).collect();
    let taken: BTreeSet<&str> = relevant_ids.iter().map(String::as_str).collect();
    let rest: Vec<&String> = kb.seen_ids().iter().filter(|id| !taken.contains(id.as_str())).collect();
    let random_ids = rest.choose_multiple(rng, num_random.min(rest.len())).map(|s| (*s).clone()).collect();
    Ok(CandidatePool {
        utterance_id: instance.utterance_id.clone(),
        relevant_ids,
        random_ids,
        gold_id: instance.gold_doc_id.clone(),
    })
}

/// Draw `k` distinct pool members (clamped to the pool size). Under
/// `force_gold` the gold rule is always drawn and the other `k - 1` are
/// uniform over the rest. Without `shuffle`, retrieval-ranked members keep
/// their rank order and unranked ones follow in pool order, except an
/// unranked gold rule, which goes first.
pub fn sample_step(pool: &CandidatePool, k: usize, force_gold: bool, shuffle: bool, rng: &mut impl Rng) -> FusionSample {
    instrument::record_gold_access();
    let members = pool.members();
    let k = k.min(members.len());
    let mut chosen: Vec<&str> = if force_gold {
        let others: Vec<&str> = members.iter().copied().filter(|&id| id != pool.gold_id).collect();
        let mut c: Vec<&str> = others.choose_multiple(rng, k - 1).copied().collect();
        c.push(&pool.gold_id);
        c
    } else {
        members.choose_multiple(rng, k).copied().collect()
    };
    if shuffle {
        instrument::record_shuffle();
        chosen.shuffle(rng);
    } else {
        let rank = |id: &str| -> (usize, usize) {
            if let Some(r) = pool.relevant_ids.iter().position(|x| x == id) {
                (1, r)
            } else if id == pool.gold_id {
                (0, 0)
            } else {
                (2, members.iter().position(|x| *x == id).unwrap_or(usize::MAX))
            }
        };
        chosen.sort_by_key(|id| rank(id));
    }
    let gold_position = chosen.iter().position(|&id| id == pool.gold_id);
    FusionSample { candidate_ids: chosen.into_iter().map(String::from).collect(), gold_position, shuffled: shuffle }
}

/// The top-`k` retrieved rules in rank order. No gold, no shuffling.
pub fn inference_candidates(ranked: &RetrievalResult, k: usize) -> FusionSample {
    FusionSample {
        candidate_ids: ranked.ranked.iter().take(k).map(|(id, _)| id.clone()).collect(),
        gold_position: None,
        shuffled: false,
    }
}

/// Per-thread counters of gold lookups, shuffles and entailment-decoder
/// calls. Evaluation code resets them and asserts that inference touched
/// none of the three.
pub mod instrument {
    use std::cell::Cell;

    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct Counts {
        pub gold_accesses: usize,
        pub shuffles: usize,
        pub entailment_calls: usize,
    }

    thread_local! {
        static COUNTS: Cell<Counts> = const { Cell::new(Counts { gold_accesses: 0, shuffles: 0, entailment_calls: 0 }) };
    }

    fn bump(f: impl FnOnce(&mut Counts)) {
        COUNTS.with(|c| {
            let mut v = c.get();
            f(&mut v);
            c.set(v);
        });
    }

    pub fn record_gold_access() {
        bump(|c| c.gold_accesses += 1);
    }
    pub fn record_shuffle() {
        bump(|c| c.shuffles += 1);
    }
    pub fn record_entailment_call() {
        bump(|c| c.entailment_calls += 1);
    }

    pub fn reset() {
        COUNTS.with(|c| c.set(Counts::default()));
    }

    pub fn counts() -> Counts {
        COUNTS.with(Cell::get)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RuleDocument;
    use crate::rng::stream;

    fn kb(n: usize) -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        for i in 0..n {
            let id = format!("d{i:02}");
            kb.insert(RuleDocument { doc_id: id.clone(), title: id, body: "x".into(), edus: vec!["x".into()] }, true)
                .unwrap();
        }
        kb
    }

    fn instance(gold: &str) -> DialogueInstance {
        DialogueInstance {
            utterance_id: "u1".into(),
            tree_id: "t".into(),
            gold_doc_id: gold.into(),
            question: "q".into(),
            scenario: String::new(),
            history: vec![],
            gold_answer: "Yes".into(),
            evidence: vec![],
        }
    }

    fn ranking(ids: impl IntoIterator<Item = String>) -> RetrievalResult {
        let ranked: Vec<(String, f64)> = ids.into_iter().enumerate().map(|(i, id)| (id, -(i as f64))).collect();
        RetrievalResult { k: ranked.len().max(1), ranked }
    }

    #[test]
    fn small_kb_pool_is_whole_kb() {
        let kb = kb(10);
        let r = ranking(kb.doc_ids().map(String::from));
        let pool = build_pool(&instance("d03"), &r, &kb, 20, 30, &mut stream(0, &[])).unwrap();
        assert_eq!(pool.relevant_ids.len(), 10);
        assert!(pool.random_ids.is_empty());
    }

    #[test]
    fn gold_missing_from_retrieval_is_injected() {
        let kb = kb(60);
        let r = ranking((0..20).map(|i| format!("d{i:02}")));
        let pool = build_pool(&instance("d55"), &r, &kb, 20, 30, &mut stream(0, &[])).unwrap();
        assert!(!pool.relevant_ids.contains(&"d55".to_string()));
        let members = pool.members();
        assert!(members.contains(&"d55"));
        assert!(members.len() <= 51);
        let relevant: BTreeSet<_> = pool.relevant_ids.iter().collect();
        assert!(pool.random_ids.iter().all(|id| !relevant.contains(id) && kb.is_seen(id)));
    }

    #[test]
    fn empty_seen_kb_is_an_error() {
        let mut kb = KnowledgeBase::new();
        kb.insert(RuleDocument { doc_id: "a".into(), title: "a".into(), body: "x".into(), edus: vec![] }, false)
            .unwrap();
        assert!(build_pool(&instance("a"), &ranking(["a".to_string()]), &kb, 20, 30, &mut stream(0, &[])).is_err());
    }

    fn standard_pool() -> CandidatePool {
        let kb = kb(60);
        let r = ranking((0..20).map(|i| format!("d{i:02}")));
        build_pool(&instance("d07"), &r, &kb, 20, 30, &mut stream(3, &["pool"])).unwrap()
    }

    #[test]
    fn k_at_least_pool_returns_whole_pool() {
        let pool = CandidatePool {
            utterance_id: "u".into(),
            relevant_ids: vec!["a".into(), "b".into()],
            random_ids: vec!["c".into()],
            gold_id: "b".into(),
        };
        let s = sample_step(&pool, 10, true, false, &mut stream(0, &[]));
        assert_eq!(s.candidate_ids, vec!["a", "b", "c"]);
        assert_eq!(s.gold_position, Some(1));
    }

    #[test]
    fn unshuffled_order_puts_unranked_gold_first() {
        let pool = CandidatePool {
            utterance_id: "u".into(),
            relevant_ids: vec!["a".into(), "b".into()],
            random_ids: vec![],
            gold_id: "g".into(),
        };
        let s = sample_step(&pool, 3, true, false, &mut stream(0, &[]));
        assert_eq!(s.candidate_ids, vec!["g", "a", "b"]);
    }

    #[test]
    fn force_gold_always_includes_gold() {
        let pool = standard_pool();
        let mut rng = stream(11, &["mc"]);
        let mut hits = 0;
        for _ in 0..1000 {
            let s = sample_step(&pool, 5, true, true, &mut rng);
            let distinct: BTreeSet<_> = s.candidate_ids.iter().collect();
            assert_eq!(distinct.len(), 5);
            hits += usize::from(s.gold_position.is_some());
        }
        assert_eq!(hits, 1000);
    }

    #[test]
    fn shuffle_positions_are_uniform() {
        let pool = standard_pool();
        let mut rng = stream(12, &["mc"]);
        let mut freq = [0usize; 5];
        for _ in 0..1000 {
            freq[sample_step(&pool, 5, true, true, &mut rng).gold_position.unwrap()] += 1;
        }
        for f in freq {
            assert!((f as f64 / 1000.0 - 0.2).abs() <= 0.05, "{freq:?}");
        }
    }

    #[test]
    fn inference_takes_rank_prefix() {
        let r = ranking(["a", "b", "c", "d", "e", "f"].map(String::from));
        let s = inference_candidates(&r, 5);
        assert_eq!(s.candidate_ids, vec!["a", "b", "c", "d", "e"]);
        assert!(!s.shuffled && s.gold_position.is_none());
        assert_eq!(s, inference_candidates(&r, 5));
        let small = ranking(["a", "b", "c"].map(String::from));
        assert_eq!(inference_candidates(&small, 5).candidate_ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn inference_records_no_gold_or_shuffle() {
        instrument::reset();
        let r = ranking(["a", "b"].map(String::from));
        inference_candidates(&r, 5);
        assert_eq!(instrument::counts(), instrument::Counts::default());
        sample_step(&standard_pool(), 5, true, true, &mut stream(0, &[]));
        assert!(instrument::counts().shuffles > 0);
    }
}
