//! Heuristic per-EDU entailment labels for the gold rule of an instance.
//!
//! Each answered follow-up question in the dialogue history is paired with
//! the EDU at minimum token-level edit distance; a `Yes` answer marks that
//! EDU `Entailment`, a `No` answer `Contradiction`. Everything else stays
//! `Neutral`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, DatasetSplit, DialogueInstance, KnowledgeBase, RuleDocument};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntailmentLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl EntailmentLabel {
    pub const ALL: [EntailmentLabel; 3] =
        [EntailmentLabel::Entailment, EntailmentLabel::Contradiction, EntailmentLabel::Neutral];

    /// Class index used by the entailment head.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn from_answer(answer: Answer) -> Self {
        match answer {
            Answer::Yes => EntailmentLabel::Entailment,
            Answer::No => EntailmentLabel::Contradiction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentLabelSequence {
    pub doc_id: String,
    pub labels: Vec<EntailmentLabel>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    /// Turns whose best distance exceeds this are ignored. `None` keeps all.
    pub max_distance: Option<usize>,
}

/// Lowercased alphanumeric tokens; punctuation acts as a separator.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unit-cost Levenshtein distance over two token sequences.
pub fn token_edit_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta.as_ref() != tb.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_distance(a: &str, b: &str) -> usize {
    token_edit_distance(&normalized_tokens(a), &normalized_tokens(b))
}

/// Label the EDUs of `gold_doc` from the dialogue history of `instance`.
/// Ties go to the lowest EDU index; a later turn overwrites an earlier one.
pub fn label_instance(
    instance: &DialogueInstance,
    gold_doc: &RuleDocument,
    config: &LabelerConfig,
) -> Result<EntailmentLabelSequence> {
    if gold_doc.edus.is_empty() {
        return Err(Error::EmptyInput(format!("EDUs of document `{}`", gold_doc.doc_id)));
    }
    let edu_tokens: Vec<Vec<String>> = gold_doc.edus.iter().map(|e| normalized_tokens(e)).collect();
    let mut labels = vec![EntailmentLabel::Neutral; edu_tokens.len()];
    for turn in &instance.history {
        let q = normalized_tokens(&turn.follow_up_question);
        let (best, dist) = edu_tokens
            .iter()
            .enumerate()
            .map(|(i, e)| (i, token_edit_distance(&q, e)))
            .min_by_key(|&(i, d)| (d, i))
            .expect("non-empty EDU list");
        if config.max_distance.is_some_and(|m| dist > m) {
            continue;
        }
        labels[best] = EntailmentLabel::from_answer(turn.follow_up_answer);
    }
    Ok(EntailmentLabelSequence { doc_id: gold_doc.doc_id.clone(), labels })
}

/// Labels for every instance of a split, keyed by utterance id.
pub fn label_split(
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    config: &LabelerConfig,
) -> Result<BTreeMap<String, EntailmentLabelSequence>> {
    let mut out = BTreeMap::new();
    for inst in &split.instances {
        let doc = kb.get(&inst.gold_doc_id).ok_or_else(|| Error::DanglingDoc {
            utterance_id: inst.utterance_id.clone(),
            doc_id: inst.gold_doc_id.clone(),
        })?;
        out.insert(inst.utterance_id.clone(), label_instance(inst, doc, config)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelCache {
    pub config_hash: String,
    pub labels: BTreeMap<String, EntailmentLabelSequence>,
}

impl LabelCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    /// Load a cache, refusing one built under a different configuration.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: Self = serde_json::from_str(&text)?;
        if cache.config_hash != expected_hash {
            return Err(Error::StaleCache {
                path: path.to_path_buf(),
                expected: expected_hash.to_string(),
                found: cache.config_hash,
            });
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialogueTurn;
    use proptest::prelude::*;

    /// Plain recursive Levenshtein with memoization.
    fn oracle_distance(a: &[String], b: &[String]) -> usize {
        fn go(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
            let v = sub.min(go(&a[1..], b, memo) + 1).min(go(a, &b[1..], memo) + 1);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut BTreeMap::new())
    }

    /// Exhaustive labeling: for each turn, scan every EDU for the smallest
    /// (distance, index); apply turns in order.
    fn oracle_labels(inst: &DialogueInstance, doc: &RuleDocument) -> Vec<EntailmentLabel> {
        let mut labels = vec![EntailmentLabel::Neutral; doc.edus.len()];
        for turn in &inst.history {
            let q = normalized_tokens(&turn.follow_up_question);
            let mut best = 0;
            let mut best_d = usize::MAX;
            for (i, e) in doc.edus.iter().enumerate() {
                let d = oracle_distance(&q, &normalized_tokens(e));
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labels[best] = EntailmentLabel::from_answer(turn.follow_up_answer);
        }
        labels
    }

    fn doc(edus: &[&str]) -> RuleDocument {
        RuleDocument {
            doc_id: "d".into(),
            title: String::new(),
            body: edus.join(" "),
            edus: edus.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn inst(turns: &[(&str, Answer)]) -> DialogueInstance {
        DialogueInstance {
            utterance_id: "u".into(),
            tree_id: "t".into(),
            gold_doc_id: "d".into(),
            question: "q".into(),
            scenario: String::new(),
            history: turns
                .iter()
                .map(|(q, a)| DialogueTurn { follow_up_question: q.to_string(), follow_up_answer: *a })
                .collect(),
            gold_answer: "Yes".into(),
            evidence: vec![],
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("", "a b c"), 3);
        assert_eq!(edit_distance("over 65", "over 65"), 0);
        let a = normalized_tokens("are you over 65");
        let b = normalized_tokens("you are over 60");
        let expected = oracle_distance(&a, &b);
        assert_eq!(expected, 3);
        assert_eq!(edit_distance("are you over 65", "you are over 60"), expected);
        assert_eq!(edit_distance("Over, 65!", "over 65"), 0);
    }

    #[test]
    fn empty_history_is_all_neutral() {
        let l = label_instance(&inst(&[]), &doc(&["a", "b"]), &LabelerConfig::default()).unwrap();
        assert_eq!(l.labels, vec![EntailmentLabel::Neutral; 2]);
    }

    #[test]
    fn single_turn_yes_and_no() {
        let d = doc(&["you are over 65", "you are disabled"]);
        for (answer, first) in [(Answer::Yes, EntailmentLabel::Entailment), (Answer::No, EntailmentLabel::Contradiction)] {
            let i = inst(&[("Are you over 65?", answer)]);
            assert_eq!(oracle_labels(&i, &d), vec![first, EntailmentLabel::Neutral]);
            let l = label_instance(&i, &d, &LabelerConfig::default()).unwrap();
            assert_eq!(l.labels, vec![first, EntailmentLabel::Neutral]);
        }
    }

    #[test]
    fn later_turn_wins_and_ties_go_low() {
        let d = doc(&["x y", "x z"]);
        // distance 1 to both: lowest index wins
        let i = inst(&[("x w", Answer::Yes)]);
        assert_eq!(label_instance(&i, &d, &LabelerConfig::default()).unwrap().labels[0], EntailmentLabel::Entailment);
        let i = inst(&[("x y", Answer::Yes), ("x y", Answer::No)]);
        assert_eq!(
            label_instance(&i, &d, &LabelerConfig::default()).unwrap().labels,
            vec![EntailmentLabel::Contradiction, EntailmentLabel::Neutral]
        );
    }

    #[test]
    fn threshold_skips_distant_turns() {
        let d = doc(&["you are over 65"]);
        let i = inst(&[("do you own a boat", Answer::Yes)]);
        let cfg = LabelerConfig { max_distance: Some(1) };
        assert_eq!(label_instance(&i, &d, &cfg).unwrap().labels, vec![EntailmentLabel::Neutral]);
    }

    #[test]
    fn empty_edus_is_error() {
        let d = RuleDocument { doc_id: "d".into(), title: String::new(), body: "x".into(), edus: vec![] };
        assert!(label_instance(&inst(&[]), &d, &LabelerConfig::default()).is_err());
    }

    #[test]
    fn stale_label_cache_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        LabelCache { config_hash: "abc".into(), labels: BTreeMap::new() }.save(&path).unwrap();
        assert!(LabelCache::load(&path, "abc").is_ok());
        assert!(matches!(LabelCache::load(&path, "def"), Err(Error::StaleCache { .. })));
    }

    const WORDS: [&str; 6] = ["you", "are", "over", "65", "a", "farmer"];

    fn phrase() -> impl Strategy<Value = String> {
        proptest::collection::vec(0..WORDS.len(), 0..6)
            .prop_map(|ix| ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
    }

    proptest! {
        #[test]
        fn distance_matches_oracle_and_is_symmetric(a in phrase(), b in phrase()) {
            let (ta, tb) = (normalized_tokens(&a), normalized_tokens(&b));
            let d = edit_distance(&a, &b);
            prop_assert_eq!(d, oracle_distance(&ta, &tb));
            prop_assert_eq!(d, edit_distance(&b, &a));
            prop_assert_eq!(d == 0, ta == tb);
        }

        #[test]
        fn labeling_matches_exhaustive_search(
            edus in proptest::collection::vec("[a-z ]{1,12}".prop_filter("non-blank", |s| !s.trim().is_empty()), 1..=8),
            turns in proptest::collection::vec((phrase(), any::<bool>()), 0..=4),
        ) {
            let d = RuleDocument { doc_id: "d".into(), title: String::new(), body: edus.join(" "), edus };
            let t: Vec<(&str, Answer)> = turns.iter()
                .map(|(q, y)| (q.as_str(), if *y { Answer::Yes } else { Answer::No }))
                .collect();
            let i = inst(&t);
            let labels = label_instance(&i, &d, &LabelerConfig::default()).unwrap().labels;
            prop_assert_eq!(&labels, &oracle_labels(&i, &d));
            let decided = labels.iter().filter(|l| **l != EntailmentLabel::Neutral).count();
            prop_assert!(decided <= i.history.len());
        }
    }
}
