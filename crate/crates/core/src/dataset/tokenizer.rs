//! Word-level tokenizer with a character fallback.
//!
//! Text is a sequence of words separated by single spaces. Known words map
//! to one token. An unknown word is spelled with character tokens: `@c` for
//! its first character and `#c` for every following one, so decoding can
//! restore word boundaries exactly. Characters without a fallback token are
//! an encoding error.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";
pub const SEP: &str = ".";
pub const TOKENIZER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    tokens: Vec<String>,
}

impl Tokenizer {
    /// Builds the vocabulary from `texts`: special tokens, then every word in
    /// lexicographic order, then `@c`/`#c` fallback tokens for every
    /// character seen.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for t in texts {
            for w in t.split(' ').filter(|w| !w.is_empty()) {
                chars.extend(w.chars());
                words.insert(w.to_string());
            }
        }
        words.remove(BOS);
        words.remove(PAD);
        words.remove(SEP);
        let mut tokens = vec![PAD.to_string(), BOS.to_string(), SEP.to_string()];
        tokens.extend(words);
        for c in &chars {
            tokens.push(format!("@{c}"));
        }
        for c in &chars {
            tokens.push(format!("#{c}"));
        }
        Self::from_tokens(tokens).expect("generated vocabulary has unique entries")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    /// Whether `word` has its own token (no fallback needed).
    pub fn knows(&self, word: &str) -> bool {
        self.index.contains_key(word) && !word.starts_with('@') && !word.starts_with('#')
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in text.split(' ') {
            if w.is_empty() {
                return Err(Error::Encoding(format!("text {text:?} has empty words (double or edge spaces)")));
            }
            match self.index.get(w) {
                Some(&id) if !w.starts_with('@') && !w.starts_with('#') => out.push(id),
                _ => {
                    for (i, c) in w.chars().enumerate() {
                        let key = if i == 0 { format!("@{c}") } else { format!("#{c}") };
                        let id = self.index.get(&key).ok_or_else(|| {
                            Error::Encoding(format!("character {c:?} of word {w:?} has no fallback token"))
                        })?;
                        out.push(*id);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let t = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::Encoding(format!("token id {id} outside vocabulary")))?;
            if let Some(rest) = t.strip_prefix('#').filter(|r| !r.is_empty()) {
                out.push_str(rest);
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(t.strip_prefix('@').filter(|r| !r.is_empty()).unwrap_or(t));
        }
        Ok(out)
    }

    /// Whether encoding `text` needs any character fallback token.
    pub fn uses_fallback(&self, text: &str) -> bool {
        text.split(' ').any(|w| !self.knows(w))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            version: TOKENIZER_VERSION,
            tokens: self.tokens.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.version != TOKENIZER_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported tokenizer version {}", file.version),
            });
        }
        Self::from_tokens(file.tokens)
    }
}
