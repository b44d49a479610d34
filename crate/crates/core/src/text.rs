//! Word-level tokenization and vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercased alphanumeric runs; every other non-space character is its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Join tokens with spaces, attaching punctuation to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let punct = t.chars().all(|c| !c.is_alphanumeric());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const EDU: &str = "[EDU]";
pub const SCN: &str = "[SCN]";
pub const USR: &str = "[USR]";
pub const HIS: &str = "[HIS]";
pub const ANS: &str = "[ANS]";

pub const SPECIALS: [&str; 9] = [PAD, UNK, BOS, EOS, EDU, SCN, USR, HIS, ANS];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every token of `texts` in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            v.push(s);
        }
        for text in texts {
            for tok in tokenize(text) {
                v.push(&tok);
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Decode ids, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i))
            .filter(|t| !SPECIALS.contains(t))
            .collect();
        detokenize(&toks)
    }

    pub fn pad(&self) -> usize {
        self.id(PAD)
    }
    pub fn bos(&self) -> usize {
        self.id(BOS)
    }
    pub fn eos(&self) -> usize {
        self.id(EOS)
    }
    pub fn edu(&self) -> usize {
        self.id(EDU)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_folds_case() {
        assert_eq!(tokenize("Are you over 65?"), vec!["are", "you", "over", "65", "?"]);
        assert_eq!(tokenize("if:\n* you"), vec!["if", ":", "*", "you"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["are", "you", "a", "farmer", "?"]), "are you a farmer?");
    }

    #[test]
    fn vocab_round_trip_and_unknowns() {
        let v = Vocab::build(["Can I get the Blue Grant?"]);
        assert_eq!(v.id(PAD), 0);
        assert_eq!(v.decode(&v.encode("can i get the blue grant?")), "can i get the blue grant?");
        assert_eq!(v.id("zebra"), v.id(UNK));
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back, v);
    }
}
