//! Text to vocabulary-index conversion.
//!
//! Index `0` is reserved for "absent": the tokenizer never produces it and the
//! perturbation code writes it over masked positions.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::Span;

/// The masking index. A row position holding this value is treated as absent.
pub const ABSENT: u32 = 0;

const OOV_KEY: &str = "oov_index";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, u32>,
    oov_index: u32,
}

impl Vocabulary {
    pub fn new(token_to_index: HashMap<String, u32>, oov_index: u32) -> Result<Self> {
        if oov_index == ABSENT {
            return Err(Error::Vocabulary("oov_index must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(token_to_index.len());
        for (token, &index) in &token_to_index {
            if index == ABSENT {
                return Err(Error::Vocabulary(format!(
                    "token {token:?} maps to the reserved index 0"
                )));
            }
            if index == oov_index {
                return Err(Error::Vocabulary(format!(
                    "token {token:?} collides with oov_index {oov_index}"
                )));
            }
            if !seen.insert(index) {
                return Err(Error::Vocabulary(format!("index {index} is assigned twice")));
            }
        }
        Ok(Vocabulary {
            token_to_index,
            oov_index,
        })
    }

    /// Assigns indices `1..` in first-seen order; the OOV index follows the
    /// last assigned token.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut token_to_index = HashMap::new();
        for token in tokens {
            let token = token.as_ref().to_lowercase();
            let next = token_to_index.len() as u32 + 1;
            token_to_index.entry(token).or_insert(next);
        }
        let oov_index = token_to_index.len() as u32 + 1;
        Vocabulary {
            token_to_index,
            oov_index,
        }
    }

    /// Parses the JSON vocabulary format: an object of token → index with a
    /// top-level `"oov_index"` entry.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let object = value
            .as_object()
            .ok_or_else(|| Error::Vocabulary("expected a JSON object".into()))?;
        let mut oov_index = None;
        let mut token_to_index = HashMap::with_capacity(object.len());
        for (key, value) in object {
            let index = value
                .as_u64()
                .filter(|&v| v <= u32::MAX as u64)
                .ok_or_else(|| {
                    Error::Vocabulary(format!("{key:?} must map to a non-negative integer"))
                })? as u32;
            if key == OOV_KEY {
                oov_index = Some(index);
            } else {
                token_to_index.insert(key.clone(), index);
            }
        }
        let oov_index =
            oov_index.ok_or_else(|| Error::Vocabulary(format!("missing \"{OOV_KEY}\"")))?;
        Vocabulary::new(token_to_index, oov_index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut entries: Vec<_> = self.token_to_index.iter().collect();
        entries.sort_by_key(|(_, &index)| index);
        let mut object = serde_json::Map::new();
        for (token, &index) in entries {
            object.insert(token.clone(), index.into());
        }
        object.insert(OOV_KEY.into(), self.oov_index.into());
        serde_json::Value::Object(object).to_string()
    }

    pub fn oov_index(&self) -> u32 {
        self.oov_index
    }

    pub fn len(&self) -> usize {
        self.token_to_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_index.is_empty()
    }

    pub fn index_of(&self, token: &str) -> u32 {
        self.token_to_index
            .get(token)
            .copied()
            .unwrap_or(self.oov_index)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_index.contains_key(token)
    }

    /// Lowercases, splits on whitespace and maps each token, falling back to
    /// the OOV index for unknown tokens.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedSentence> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let indices = tokens.iter().map(|t| self.index_of(t)).collect();
        Ok(TokenizedSentence { indices, tokens })
    }
}

/// A tokenized input: aligned token strings and vocabulary indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub indices: Vec<u32>,
    pub tokens: Vec<String>,
}

impl TokenizedSentence {
    /// Builds a sentence directly from indices, using the decimal index as
    /// the token text. Handy when the caller has no vocabulary.
    pub fn from_indices(indices: Vec<u32>) -> Self {
        let tokens = indices.iter().map(u32::to_string).collect();
        TokenizedSentence { indices, tokens }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn detokenize_span(&self, span: Span) -> Result<String> {
        if span.start >= span.end || span.end > self.len() {
            return Err(Error::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: self.len(),
            });
        }
        Ok(self.tokens[span.start..span.end].join(" "))
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            [("good".to_string(), 1), ("movie".to_string(), 2)].into(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn tokenize_direct_lookup() {
        let s = vocab().tokenize("Good movie").unwrap();
        assert_eq!(s.indices, vec![1, 2]);
        assert_eq!(s.tokens, vec!["good", "movie"]);
    }

    #[test]
    fn tokenize_oov_fallback() {
        assert_eq!(vocab().tokenize("good zzz").unwrap().indices, vec![1, 3]);
    }

    #[test]
    fn tokenize_sample_sentence() {
        let v = Vocabulary::from_tokens(["a", "fun", "ride"]);
        let s = v.tokenize("a fun ride").unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.indices.iter().all(|&i| i != ABSENT));
        assert!(s.indices.iter().all(|&i| i != v.oov_index()));
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(vocab().tokenize("   \t\n"), Err(Error::EmptyText)));
        assert!(matches!(vocab().tokenize(""), Err(Error::EmptyText)));
    }

    #[test]
    fn detokenize() {
        let s = vocab().tokenize("good movie").unwrap();
        assert_eq!(s.detokenize_span(Span::new(0, 2)).unwrap(), "good movie");
        assert_eq!(s.detokenize_span(Span::new(1, 2)).unwrap(), "movie");
        let v = Vocabulary::from_tokens("a bad movie that happened to good actors".split(' '));
        let s = v.tokenize("a bad movie that happened to good actors").unwrap();
        assert_eq!(s.detokenize_span(Span::new(0, 3)).unwrap(), "a bad movie");
    }

    #[test]
    fn detokenize_out_of_range() {
        let s = vocab().tokenize("good movie").unwrap();
        assert!(s.detokenize_span(Span::new(1, 3)).is_err());
        assert!(s.detokenize_span(Span::new(1, 1)).is_err());
    }

    #[test]
    fn json_loader_validates() {
        let v = Vocabulary::from_json(r#"{"good": 1, "movie": 2, "oov_index": 3}"#).unwrap();
        assert_eq!(v, vocab());
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);

        for bad in [
            r#"{"good": 0, "oov_index": 3}"#,
            r#"{"good": 1, "oov_index": 0}"#,
            r#"{"good": 1, "bad": 1, "oov_index": 3}"#,
            r#"{"good": 3, "oov_index": 3}"#,
            r#"{"good": 1}"#,
            r#"{"good": -1, "oov_index": 3}"#,
            r#"["good"]"#,
        ] {
            assert!(Vocabulary::from_json(bad).is_err(), "{bad}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_and_no_absent(words in prop::collection::vec("[a-zA-Z]{1,8}", 1..20),
                                        seps in prop::collection::vec("[ \t\n]{1,3}", 20)) {
                let vocab = Vocabulary::from_tokens(&words);
                let mut text = String::from(" ");
                for (w, s) in words.iter().zip(&seps) {
                    text.push_str(w);
                    text.push_str(s);
                }
                let sentence = vocab.tokenize(&text).unwrap();
                prop_assert!(sentence.indices.iter().all(|&i| i != ABSENT));
                let expected = words.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ");
                prop_assert_eq!(sentence.detokenize_span(Span::new(0, sentence.len())).unwrap(), expected);
            }
        }
    }
}
