//! Word-level tokenization, vocabulary, and stopword handling.
//!
//! The tokenizer lowercases and splits on whitespace, emitting punctuation
//! characters as standalone tokens. Word-level keeps keyword-matching
//! metrics exact set semantics and the vocabulary small.

pub mod corpus;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Lowercase and split into word tokens; punctuation becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token <-> id bijection with stable reserved ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    /// Build from token frequencies: every token with `freq >= min_freq`
    /// gets an id, ordered by descending frequency then token text.
    pub fn build(freqs: &HashMap<String, u64>, min_freq: u64) -> Result<Self> {
        if freqs.is_empty() {
            return Err(CoreError::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&String, &u64)> =
            freqs.iter().filter(|(t, &c)| c >= min_freq && !RESERVED.contains(&t.as_str())).collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.clone()));
        Ok(Vocabulary::from_tokens(tokens))
    }

    /// Frequency-count convenience over raw text documents.
    pub fn count_tokens(texts: impl Iterator<Item = String>) -> HashMap<String, u64> {
        let mut freqs: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(&text) {
                *freqs.entry(tok).or_insert(0) += 1;
            }
        }
        freqs
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    pub fn encode(&self, words: &[String]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::json!({ "version": 1, "tokens": self.tokens });
        retgen_numeric::atomic_write(path, serde_json::to_string_pretty(&json)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&raw)?;
        let tokens: Vec<String> = serde_json::from_value(
            v.get("tokens").cloned().ok_or_else(|| CoreError::Data("vocabulary missing tokens".into()))?,
        )?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(CoreError::Data(format!("reserved token {i} is not `{r}`")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Surface-token stopword set, lowercase-normalized.
#[derive(Debug, Clone, Default)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl StopwordList {
    pub fn empty() -> Self {
        StopwordList::default()
    }

    /// The list shipped with the repo (English function words plus
    /// punctuation). The reference stopword source is not pinned anywhere
    /// authoritative, so this file is the declared artifact.
    pub fn builtin() -> Self {
        Self::from_lines(include_str!("../../assets/stopwords.txt"))
    }

    pub fn from_lines(content: &str) -> Self {
        let mut words = HashSet::new();
        for line in content.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            // normalize the same way the tokenizer would
            for tok in tokenize(line) {
                words.insert(tok);
            }
        }
        StopwordList { words }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::from_lines(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn insert(&mut self, word: &str) {
        for tok in tokenize(word) {
            self.words.insert(tok);
        }
    }

    /// Also treat the top `percent`% most frequent corpus tokens as stop
    /// words (the corpus-frequency filter; default 1%).
    pub fn augment_with_top_frequency(&mut self, freqs: &HashMap<String, u64>, percent: f64) {
        if percent <= 0.0 || freqs.is_empty() {
            return;
        }
        let n_add = ((freqs.len() as f64) * percent / 100.0).floor() as usize;
        let mut ranked: Vec<(&String, &u64)> = freqs.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (tok, _) in ranked.into_iter().take(n_add) {
            self.words.insert(tok.clone());
        }
    }

    /// Stopword-filtered bag of words.
    pub fn filter_set<'a>(&self, words: impl Iterator<Item = &'a String>) -> HashSet<String> {
        words.filter(|w| !self.contains(w)).cloned().collect()
    }
}

/// Sentence count by terminal punctuation; a trailing fragment without a
/// terminator still counts as a sentence.
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut has_content = false;
    for ch in text.chars() {
        match ch {
            '.' | '!' | '?' => {
                if has_content {
                    count += 1;
                    has_content = false;
                }
            }
            c if c.is_alphanumeric() => has_content = true,
            _ => {}
        }
    }
    if has_content {
        count += 1;
    }
    count
}

/// Frequencies have to be computed somewhere central for the stopword
/// augmentation; expose the counting for reuse.
pub fn token_frequencies(texts: impl Iterator<Item = String>) -> BTreeMap<String, u64> {
    let mut freqs = BTreeMap::new();
    for text in texts {
        for tok in tokenize(&text) {
            *freqs.entry(tok).or_insert(0) += 1;
        }
    }
    freqs
}
