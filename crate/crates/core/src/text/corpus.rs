//! Corpus and document ingestion: line-oriented JSON records with length
//! filtering, plus the synthetic grounded-copy corpus used for training
//! and verification at desk scale.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{sentence_count, tokenize};

/// One (context, target) pair. Token sequences are normalized surface
/// words; models encode them against a vocabulary at the call site.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusExample {
    pub id: String,
    pub context: Vec<String>,
    pub target: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_doc_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub tokens: Vec<String>,
    pub raw_text: String,
}

/// Immutable document collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct DocumentStore {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentStore {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(CoreError::Data(format!("duplicate document id `{}`", d.id)));
            }
        }
        Ok(DocumentStore { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Document {
        &self.docs[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LengthCaps {
    pub max_context: usize,
    pub max_target: usize,
    pub doc_cap: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        LengthCaps { max_context: 256, max_target: 128, doc_cap: 100 }
    }
}

/// Ingestion drop accounting, reported with every load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounters {
    pub over_length: usize,
    pub single_sentence: usize,
    pub malformed: usize,
}

#[derive(Deserialize)]
struct RawCorpusRecord {
    id: String,
    context: String,
    target: String,
    #[serde(default)]
    oracle_doc_id: Option<String>,
}

#[derive(Deserialize)]
struct RawDocumentRecord {
    id: String,
    title: String,
    text: String,
}

fn is_header_line(value: &serde_json::Value) -> bool {
    value.get("header").is_some()
}

/// Stream corpus records from JSONL, dropping over-length examples and
/// skipping malformed lines with counts. A leading `{"header": ...}` line
/// is metadata, not a record.
pub fn load_corpus(path: &Path, caps: LengthCaps) -> Result<(Vec<CorpusExample>, DropCounters)> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut examples = Vec::new();
    let mut counters = DropCounters::default();
    let mut attempted = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("warning: {}:{}: malformed record: {e}", path.display(), lineno + 1);
                counters.malformed += 1;
                attempted += 1;
                continue;
            }
        };
        if lineno == 0 && is_header_line(&value) {
            continue;
        }
        attempted += 1;
        let raw: RawCorpusRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: {}:{}: malformed record: {e}", path.display(), lineno + 1);
                counters.malformed += 1;
                continue;
            }
        };
        let context = tokenize(&raw.context);
        let target = tokenize(&raw.target);
        if context.len() > caps.max_context || target.len() > caps.max_target {
            counters.over_length += 1;
            continue;
        }
        examples.push(CorpusExample {
            id: raw.id,
            context,
            target,
            oracle_doc_id: raw.oracle_doc_id,
        });
    }
    if attempted > 0 && examples.is_empty() && counters.malformed == attempted {
        return Err(CoreError::Data(format!(
            "all {} records in {} are malformed",
            attempted,
            path.display()
        )));
    }
    Ok((examples, counters))
}

/// Load documents, dropping single-sentence entries and truncating to the
/// document token cap.
pub fn load_documents(path: &Path, caps: LengthCaps) -> Result<(DocumentStore, DropCounters)> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open documents {}: {e}", path.display())))?;
    let mut docs = Vec::new();
    let mut counters = DropCounters::default();
    let mut attempted = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("warning: {}:{}: malformed record: {e}", path.display(), lineno + 1);
                counters.malformed += 1;
                attempted += 1;
                continue;
            }
        };
        if lineno == 0 && is_header_line(&value) {
            continue;
        }
        attempted += 1;
        let raw: RawDocumentRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: {}:{}: malformed record: {e}", path.display(), lineno + 1);
                counters.malformed += 1;
                continue;
            }
        };
        if sentence_count(&raw.text) < 2 {
            counters.single_sentence += 1;
            continue;
        }
        let mut tokens = tokenize(&raw.text);
        if tokens.len() > caps.doc_cap {
            tokens.truncate(caps.doc_cap);
            counters.over_length += 1;
        }
        docs.push(Document { id: raw.id, title: raw.title, tokens, raw_text: raw.text });
    }
    if attempted > 0 && docs.is_empty() && counters.malformed == attempted {
        return Err(CoreError::Data(format!(
            "all {} records in {} are malformed",
            attempted,
            path.display()
        )));
    }
    Ok((DocumentStore::from_documents(docs)?, counters))
}

/// JSONL writers; `header` becomes the leading metadata line.
pub fn save_corpus(path: &Path, header: &serde_json::Value, examples: &[CorpusExample]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({ "header": header }))?);
    out.push('\n');
    for ex in examples {
        let record = serde_json::json!({
            "id": ex.id,
            "context": ex.context.join(" "),
            "target": ex.target.join(" "),
            "oracle_doc_id": ex.oracle_doc_id,
        });
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    retgen_numeric::atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn save_documents(path: &Path, header: &serde_json::Value, docs: &DocumentStore) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({ "header": header }))?);
    out.push('\n');
    for d in docs.iter() {
        let record = serde_json::json!({ "id": d.id, "title": d.title, "text": d.raw_text });
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    retgen_numeric::atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Grounded-copy corpus: each document is a unique key plus fact tokens;
/// each example's context contains one document's key among distractors
/// and its target is that document's facts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub key_len: usize,
    pub fact_len: usize,
    pub n_examples: usize,
    #[serde(default = "default_distractors")]
    pub distractor_len: usize,
    /// How many of the distractors are key tokens borrowed from other
    /// documents (the rest come from the generic pool). Foreign key
    /// tokens make the context ambiguous enough that copying from the
    /// retrieved document beats memorizing the context.
    #[serde(default = "default_foreign")]
    pub foreign_distractors: usize,
}

fn default_distractors() -> usize {
    6
}

fn default_foreign() -> usize {
    2
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 100,
            vocab_size: 600,
            key_len: 2,
            fact_len: 3,
            n_examples: 2000,
            distractor_len: 6,
            foreign_distractors: 2,
        }
    }
}

/// Deterministic given `seed`. Key words, fact words, and the generic
/// pool are disjoint regions of the word list, so facts never leak into
/// contexts. Distractors are single key tokens borrowed from other
/// documents (at most one per foreign document) when `key_len >= 2`:
/// the oracle stays the unique key-overlap maximizer, but predicting the
/// facts from the context alone becomes a combinatorial problem while
/// copying them from the retrieved document stays easy.
pub fn make_synthetic_grounded_corpus(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(Vec<CorpusExample>, DocumentStore)> {
    let needed = config.n_docs * (config.key_len + config.fact_len);
    if config.vocab_size < needed + 1 {
        return Err(CoreError::Data(format!(
            "vocab_size {} too small: need {} key/fact words plus a distractor pool",
            config.vocab_size, needed
        )));
    }
    if config.key_len == 0 || config.fact_len == 0 || config.n_docs == 0 {
        return Err(CoreError::Data("n_docs, key_len, and fact_len must be positive".into()));
    }
    let width = config.vocab_size.to_string().len();
    let word = |i: usize| format!("w{:0width$}", i, width = width);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_keys = config.n_docs * config.key_len;
    let n_facts = config.n_docs * config.fact_len;
    let pool: Vec<String> = (n_keys + n_facts..config.vocab_size).map(word).collect();

    let mut docs = Vec::with_capacity(config.n_docs);
    for d in 0..config.n_docs {
        let keys: Vec<String> = (0..config.key_len).map(|j| word(d * config.key_len + j)).collect();
        let facts: Vec<String> =
            (0..config.fact_len).map(|j| word(n_keys + d * config.fact_len + j)).collect();
        let raw_text = format!("{} . {} .", keys.join(" "), facts.join(" "));
        docs.push(Document {
            id: format!("doc{:04}", d),
            title: format!("synthetic document {d}"),
            tokens: tokenize(&raw_text),
            raw_text,
        });
    }

    let n_foreign = if config.key_len >= 2 && config.n_docs > 1 {
        config.foreign_distractors.min(config.distractor_len).min(config.n_docs - 1)
    } else {
        0
    };
    let mut examples = Vec::with_capacity(config.n_examples);
    for e in 0..config.n_examples {
        let oracle = rng.random_range(0..config.n_docs);
        let mut context: Vec<String> =
            (0..config.key_len).map(|j| word(oracle * config.key_len + j)).collect();
        // one key token from each of `n_foreign` distinct foreign docs:
        // foreign overlap stays < key_len by construction
        let mut foreign: Vec<usize> = (0..config.n_docs).filter(|&d| d != oracle).collect();
        foreign.shuffle(&mut rng);
        for &d in foreign.iter().take(n_foreign) {
            let j = rng.random_range(0..config.key_len);
            context.push(word(d * config.key_len + j));
        }
        for _ in n_foreign..config.distractor_len {
            context.push(pool[rng.random_range(0..pool.len())].clone());
        }
        context.shuffle(&mut rng);
        let target: Vec<String> =
            (0..config.fact_len).map(|j| word(n_keys + oracle * config.fact_len + j)).collect();
        examples.push(CorpusExample {
            id: format!("ex{:05}", e),
            context,
            target,
            oracle_doc_id: Some(format!("doc{:04}", oracle)),
        });
    }
    Ok((examples, DocumentStore::from_documents(docs)?))
}
