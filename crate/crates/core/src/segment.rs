//! Rule-text segmentation into elementary discourse units (EDUs).
//!
//! The default [`RuleSegmenter`] works on whitespace tokens of the body and
//! only chooses boundaries between them, so joining the EDUs with single
//! spaces gives back the whitespace-normalized body. Boundaries are placed:
//!
//! * after a token ending in `.`, `?` or `!` (bullet tokens such as `1.`
//!   excepted), and at line breaks;
//! * before a bullet: a token matching one of the bullet patterns that
//!   starts a line or follows a token ending in `:` or `;`;
//! * before the first token of a discourse marker (matched case-insensitively
//!   on whole tokens, trailing punctuation ignored). Markers are tried in
//!   configured order at each position; a matched multi-word marker is
//!   consumed whole, so `or if` yields a single boundary before `or`.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeBase;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub discourse_markers: Vec<String>,
    pub bullet_patterns: Vec<String>,
    pub max_edus: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            discourse_markers: ["if", "unless", "or if", "and if", "provided", "when"]
                .into_iter()
                .map(String::from)
                .collect(),
            bullet_patterns: vec![r"^[*•\-]$".into(), r"^\d+[.)]$".into(), r"^\([a-z0-9]\)$".into()],
            max_edus: 32,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_edus == 0 {
            return Err(Error::Config("segmenter.max_edus must be at least 1".into()));
        }
        if self.discourse_markers.is_empty() {
            return Err(Error::Config("segmenter.discourse_markers must not be empty".into()));
        }
        if self.discourse_markers.iter().any(|m| m.split_whitespace().next().is_none()) {
            return Err(Error::Config("segmenter.discourse_markers contains a blank marker".into()));
        }
        Ok(())
    }
}

/// Anything that can split a rule body into EDUs.
pub trait Segmenter: Send + Sync {
    fn segment(&self, body: &str) -> Result<Vec<String>>;
}

#[derive(Debug, Clone)]
pub struct RuleSegmenter {
    markers: Vec<Vec<String>>,
    bullets: Vec<Regex>,
    max_edus: usize,
}

impl RuleSegmenter {
    pub fn new(config: &SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let markers = config
            .discourse_markers
            .iter()
            .map(|m| m.split_whitespace().map(str::to_lowercase).collect())
            .collect();
        let bullets = config
            .bullet_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("bullet pattern `{p}`: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { markers, bullets, max_edus: config.max_edus })
    }

    fn is_bullet(&self, token: &str) -> bool {
        self.bullets.iter().any(|b| b.is_match(token))
    }

    fn marker_len_at(&self, words: &[String], i: usize) -> Option<usize> {
        self.markers.iter().find_map(|m| {
            let end = i + m.len();
            (end <= words.len() && words[i..end] == m[..]).then_some(m.len())
        })
    }
}

impl Default for RuleSegmenter {
    fn default() -> Self {
        Self::new(&SegmenterConfig::default()).expect("default config is valid")
    }
}

fn bare_lower(token: &str) -> String {
    token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl Segmenter for RuleSegmenter {
    fn segment(&self, body: &str) -> Result<Vec<String>> {
        // (token, starts a new line)
        let mut tokens: Vec<(&str, bool)> = Vec::new();
        for line in body.lines() {
            for (j, tok) in line.split_whitespace().enumerate() {
                tokens.push((tok, j == 0));
            }
        }
        if tokens.is_empty() {
            return Err(Error::EmptyInput("rule body".into()));
        }
        let words: Vec<String> = tokens.iter().map(|(t, _)| bare_lower(t)).collect();
        let bullet: Vec<bool> = (0..tokens.len())
            .map(|i| {
                let (tok, line_start) = tokens[i];
                let listed = line_start || i == 0 || tokens[i - 1].0.ends_with([':', ';']);
                listed && self.is_bullet(tok)
            })
            .collect();
        let mut boundary = vec![false; tokens.len()];
        let mut i = 0;
        while i < tokens.len() {
            let line_start = tokens[i].1;
            if i > 0 {
                let prev = tokens[i - 1].0;
                let sentence_end = prev.ends_with(['.', '?', '!']) && !bullet[i - 1];
                if line_start || sentence_end || bullet[i] {
                    boundary[i] = true;
                }
            }
            if let Some(len) = self.marker_len_at(&words, i) {
                boundary[i] = i > 0;
                i += len;
            } else {
                i += 1;
            }
        }
        let mut edus: Vec<String> = Vec::new();
        for (i, (tok, _)) in tokens.iter().enumerate() {
            match edus.last_mut() {
                Some(cur) if !boundary[i] => {
                    cur.push(' ');
                    cur.push_str(tok);
                }
                _ => edus.push((*tok).to_string()),
            }
        }
        if edus.len() > self.max_edus {
            log::warn!("segmentation produced {} EDUs; keeping the first {}", edus.len(), self.max_edus);
            edus.truncate(self.max_edus);
        }
        Ok(edus)
    }
}

/// Whitespace-normalized form: single spaces, trimmed.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Segment every document of `kb`; existing segmentations are recomputed.
pub fn segment_kb(kb: &KnowledgeBase, segmenter: &dyn Segmenter) -> Result<KnowledgeBase> {
    let mut out = kb.clone();
    for doc in out.documents_mut() {
        doc.edus = segmenter.segment(&doc.body).map_err(|e| e.in_doc(&doc.doc_id))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RuleDocument;
    use proptest::prelude::*;

    fn seg(body: &str) -> Vec<String> {
        RuleSegmenter::default().segment(body).unwrap()
    }

    #[test]
    fn single_clause_is_one_edu() {
        assert_eq!(seg("You must be a resident."), vec!["You must be a resident."]);
    }

    #[test]
    fn empty_body_is_an_error() {
        assert!(matches!(RuleSegmenter::default().segment(""), Err(Error::EmptyInput(_))));
        assert!(matches!(RuleSegmenter::default().segment("  \n "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn splits_on_if_and_or_if() {
        assert_eq!(
            seg("You qualify if you are over 65, or if you are disabled."),
            vec!["You qualify", "if you are over 65,", "or if you are disabled."]
        );
    }

    #[test]
    fn bullets_and_sentences() {
        let body = "You can get the Blue Grant if:\n* you are a farmer\n* you own land. Apply online.";
        assert_eq!(
            seg(body),
            vec!["You can get the Blue Grant", "if:", "* you are a farmer", "* you own land.", "Apply online."]
        );
    }

    #[test]
    fn overflow_truncates_tail() {
        let cfg = SegmenterConfig { max_edus: 2, ..Default::default() };
        let s = RuleSegmenter::new(&cfg).unwrap();
        assert_eq!(s.segment("A. B. C.").unwrap(), vec!["A.", "B."]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SegmenterConfig { max_edus: 0, ..Default::default() };
        assert!(RuleSegmenter::new(&cfg).is_err());
        let cfg = SegmenterConfig { discourse_markers: vec![], ..Default::default() };
        assert!(RuleSegmenter::new(&cfg).is_err());
    }

    fn toy_kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        for (id, body) in [
            ("d1", "You must be a resident."),
            ("d2", "You can claim unless you are a student."),
            ("d3", "Apply when you retire and if you have savings. Call us."),
        ] {
            kb.insert(RuleDocument { doc_id: id.into(), title: id.into(), body: body.into(), edus: vec![] }, true)
                .unwrap();
        }
        kb
    }

    #[test]
    fn segment_kb_matches_hand_segmentation_and_is_idempotent() {
        let seg = RuleSegmenter::default();
        let once = segment_kb(&toy_kb(), &seg).unwrap();
        assert_eq!(once.get("d1").unwrap().edus, vec!["You must be a resident."]);
        assert_eq!(once.get("d2").unwrap().edus, vec!["You can claim", "unless you are a student."]);
        assert_eq!(
            once.get("d3").unwrap().edus,
            vec!["Apply", "when you retire", "and if you have savings.", "Call us."]
        );
        assert_eq!(segment_kb(&once, &seg).unwrap(), once);
    }

    #[test]
    fn segment_kb_reports_doc_context() {
        let mut kb = KnowledgeBase::new();
        kb.insert(RuleDocument { doc_id: "blank".into(), title: String::new(), body: " ".into(), edus: vec![] }, true)
            .unwrap();
        let err = segment_kb(&kb, &RuleSegmenter::default()).unwrap_err();
        assert!(matches!(err, Error::Document { ref doc_id, .. } if doc_id == "blank"));
    }

    proptest! {
        #[test]
        fn coverage_order_and_determinism(words in proptest::collection::vec(
            prop_oneof![
                Just("if".to_string()), Just("or".to_string()), Just("unless".to_string()),
                Just("*".to_string()), Just("end.".to_string()), Just("\n".to_string()),
                "[a-z]{1,6},?".prop_map(|s| s),
            ], 1..30)) {
            let body = words.join(" ");
            prop_assume!(!body.trim().is_empty());
            let s = RuleSegmenter::new(&SegmenterConfig { max_edus: 1000, ..Default::default() }).unwrap();
            let edus = s.segment(&body).unwrap();
            prop_assert!(!edus.is_empty());
            prop_assert_eq!(edus.join(" "), normalize_whitespace(&body));
            prop_assert_eq!(&edus, &s.segment(&body).unwrap());
            prop_assert!(edus.iter().all(|e| !e.is_empty()));
        }
    }
}
