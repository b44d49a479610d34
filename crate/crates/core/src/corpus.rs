//! Knowledge base and dialogue splits: loading, validation and serialization.
//!
//! Both file kinds are UTF-8 JSON Lines. A knowledge-base record carries
//! `doc_id`, `title`, `body`, `seen` and optionally `edus`; a split record
//! carries `utterance_id`, `tree_id`, `gold_doc_id`, `question`, `scenario`,
//! `history` (list of `{follow_up_question, follow_up_answer}`),
//! `gold_answer` and `evidence`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edus: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct KbRecord {
    doc_id: String,
    title: String,
    body: String,
    seen: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    edus: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    documents: BTreeMap<String, RuleDocument>,
    seen_ids: BTreeSet<String>,
    unseen_ids: BTreeSet<String>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: RuleDocument, seen: bool) -> Result<()> {
        if self.documents.contains_key(&doc.doc_id) {
            return Err(Error::DuplicateDoc(doc.doc_id));
        }
        if seen {
            self.seen_ids.insert(doc.doc_id.clone());
        } else {
            self.unseen_ids.insert(doc.doc_id.clone());
        }
        self.documents.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&RuleDocument> {
        self.documents.get(doc_id)
    }

    pub fn get_mut(&mut self, doc_id: &str) -> Option<&mut RuleDocument> {
        self.documents.get_mut(doc_id)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.documents.contains_key(doc_id)
    }

    /// Documents in doc_id order.
    pub fn documents(&self) -> impl Iterator<Item = &RuleDocument> {
        self.documents.values()
    }

    pub fn documents_mut(&mut self) -> impl Iterator<Item = &mut RuleDocument> {
        self.documents.values_mut()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.documents.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn seen_ids(&self) -> &BTreeSet<String> {
        &self.seen_ids
    }

    pub fn unseen_ids(&self) -> &BTreeSet<String> {
        &self.unseen_ids
    }

    pub fn is_seen(&self, doc_id: &str) -> bool {
        self.seen_ids.contains(doc_id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for doc in self.documents.values() {
            let rec = KbRecord {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                body: doc.body.clone(),
                seen: self.is_seen(&doc.doc_id),
                edus: doc.edus.clone(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut kb = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: KbRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            kb.insert(RuleDocument { doc_id: rec.doc_id, title: rec.title, body: rec.body, edus: rec.edus }, rec.seen)?;
        }
        Ok(kb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub follow_up_question: String,
    pub follow_up_answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub utterance_id: String,
    pub tree_id: String,
    pub gold_doc_id: String,
    pub question: String,
    pub scenario: String,
    pub history: Vec<DialogueTurn>,
    pub gold_answer: String,
    #[serde(default)]
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Yes,
    No,
    Inquire,
}

impl Decision {
    pub const ALL: [Decision; 3] = [Decision::Yes, Decision::No, Decision::Inquire];

    /// Classify a gold or generated answer text: trimmed, case-insensitive
    /// "yes"/"no" are decisions, anything else is a follow-up question.
    pub fn of_text(text: &str) -> Self {
        let t = text.trim();
        if t.eq_ignore_ascii_case("yes") {
            Decision::Yes
        } else if t.eq_ignore_ascii_case("no") {
            Decision::No
        } else {
            Decision::Inquire
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Yes => "Yes",
            Decision::No => "No",
            Decision::Inquire => "Inquire",
        }
    }
}

pub fn decision_class(instance: &DialogueInstance) -> Decision {
    Decision::of_text(&instance.gold_answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub instances: Vec<DialogueInstance>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, instances: Vec<DialogueInstance>) -> Self {
        Self { name, instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Every gold_doc_id must resolve and every gold answer must be non-empty.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        for inst in &self.instances {
            if !kb.contains(&inst.gold_doc_id) {
                return Err(Error::DanglingDoc {
                    utterance_id: inst.utterance_id.clone(),
                    doc_id: inst.gold_doc_id.clone(),
                });
            }
            if inst.gold_answer.trim().is_empty() {
                return Err(Error::EmptyInput(format!("gold_answer of `{}`", inst.utterance_id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, name: SplitName, path: &Path, kb: &KnowledgeBase) -> Result<Self> {
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let inst: DialogueInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            instances.push(inst);
        }
        let split = Self { name, instances };
        split.validate(kb)?;
        Ok(split)
    }

    /// Gold documents used by this split.
    pub fn gold_ids(&self) -> BTreeSet<String> {
        self.instances.iter().map(|i| i.gold_doc_id.clone()).collect()
    }
}

fn read(path: &Path) -> Result<String> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    Ok(text)
}

pub fn load_knowledge_base(path: &Path) -> Result<KnowledgeBase> {
    KnowledgeBase::from_jsonl(&read(path)?, path)
}

pub fn load_split(path: &Path, name: SplitName, kb: &KnowledgeBase) -> Result<DatasetSplit> {
    DatasetSplit::from_jsonl(&read(path)?, name, path, kb)
}

/// Write `contents` atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Seen/unseen partition of evaluation instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Seen,
    Unseen,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Seen => "seen",
            Subset::Unseen => "unseen",
        }
    }
}

/// An instance is `Seen` when its gold rule is the gold rule of at least one
/// training instance.
#[derive(Debug, Clone, Default)]
pub struct SubsetIndex {
    train_gold: BTreeSet<String>,
}

impl SubsetIndex {
    pub fn from_train(train: &DatasetSplit) -> Self {
        Self { train_gold: train.gold_ids() }
    }

    pub fn subset(&self, instance: &DialogueInstance) -> Subset {
        if self.train_gold.contains(&instance.gold_doc_id) {
            Subset::Seen
        } else {
            Subset::Unseen
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb_line(id: &str, seen: bool) -> String {
        format!(r#"{{"doc_id":"{id}","title":"t {id}","body":"You must be a resident.","seen":{seen}}}"#)
    }

    fn inst(id: &str, gold: &str, answer: &str) -> DialogueInstance {
        DialogueInstance {
            utterance_id: id.into(),
            tree_id: "t".into(),
            gold_doc_id: gold.into(),
            question: "Can I?".into(),
            scenario: String::new(),
            history: vec![],
            gold_answer: answer.into(),
            evidence: vec![],
        }
    }

    #[test]
    fn loads_two_distinct_records() {
        let text = format!("{}\n{}\n", kb_line("a", true), kb_line("b", false));
        let kb = KnowledgeBase::from_jsonl(&text, Path::new("kb.jsonl")).unwrap();
        assert_eq!(kb.len(), 2);
        assert!(kb.is_seen("a") && !kb.is_seen("b"));
        assert_eq!(kb.seen_ids().len() + kb.unseen_ids().len(), kb.len());
    }

    #[test]
    fn duplicate_doc_id_is_rejected() {
        let text = format!("{}\n{}\n", kb_line("a", true), kb_line("a", true));
        let err = KnowledgeBase::from_jsonl(&text, Path::new("kb.jsonl")).unwrap_err();
        assert!(matches!(err, Error::DuplicateDoc(id) if id == "a"));
    }

    #[test]
    fn malformed_record_names_line() {
        let text = format!("{}\n{{not json\n", kb_line("a", true));
        match KnowledgeBase::from_jsonl(&text, Path::new("kb.jsonl")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_split_file_gives_empty_split() {
        let kb = KnowledgeBase::new();
        let s = DatasetSplit::from_jsonl("", SplitName::Dev, Path::new("dev.jsonl"), &kb).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn dangling_gold_doc_is_referential_error() {
        let kb = KnowledgeBase::from_jsonl(&kb_line("a", true), Path::new("kb")).unwrap();
        let line = serde_json::to_string(&inst("u1", "missing", "Yes")).unwrap();
        let err = DatasetSplit::from_jsonl(&line, SplitName::Dev, Path::new("dev"), &kb).unwrap_err();
        assert!(matches!(err, Error::DanglingDoc { .. }));
    }

    #[test]
    fn unknown_follow_up_answer_is_parse_error() {
        let kb = KnowledgeBase::from_jsonl(&kb_line("a", true), Path::new("kb")).unwrap();
        let line = r#"{"utterance_id":"u","tree_id":"t","gold_doc_id":"a","question":"q","scenario":"","history":[{"follow_up_question":"x?","follow_up_answer":"Maybe"}],"gold_answer":"Yes","evidence":[]}"#;
        let err = DatasetSplit::from_jsonl(line, SplitName::Dev, Path::new("dev"), &kb).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn decision_class_examples() {
        assert_eq!(decision_class(&inst("u", "a", "Yes")), Decision::Yes);
        assert_eq!(decision_class(&inst("u", "a", "no ")), Decision::No);
        assert_eq!(decision_class(&inst("u", "a", "Do you live in the UK?")), Decision::Inquire);
    }

    #[test]
    fn serialization_round_trips() {
        let text = format!("{}\n{}\n", kb_line("b", false), kb_line("a", true));
        let kb = KnowledgeBase::from_jsonl(&text, Path::new("kb")).unwrap();
        let again = KnowledgeBase::from_jsonl(&kb.to_jsonl().unwrap(), Path::new("kb")).unwrap();
        assert_eq!(kb, again);
        assert_eq!(kb.to_jsonl().unwrap(), again.to_jsonl().unwrap());

        let mut i = inst("u1", "a", "Are you over 65?");
        i.history.push(DialogueTurn { follow_up_question: "Are you a resident?".into(), follow_up_answer: Answer::No });
        let split = DatasetSplit::new(SplitName::Train, vec![i]);
        let back = DatasetSplit::from_jsonl(&split.to_jsonl().unwrap(), SplitName::Train, Path::new("t"), &kb).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn subset_by_training_gold_membership() {
        let train = DatasetSplit::new(SplitName::Train, vec![inst("u1", "a", "Yes")]);
        let idx = SubsetIndex::from_train(&train);
        assert_eq!(idx.subset(&inst("d1", "a", "No")), Subset::Seen);
        assert_eq!(idx.subset(&inst("d2", "b", "No")), Subset::Unseen);
    }
}
