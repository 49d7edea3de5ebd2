//! Dual-encoder dense retriever: inner-product scoring over a shared
//! embedding space, LSH-backed candidate selection with an exhaustive
//! oracle, and staleness-tolerant index refresh.
//!
//! The index is only ever a candidate selector. Reported scores are always
//! recomputed against the current encoder parameters, so a stale index can
//! change *which* documents are considered but never what they score.

pub mod index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retgen_numeric::{softmax_vec, ParamBinding, ParamStore, Tape, VarId};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::corpus::DocumentStore;
use crate::text::{TokenId, Vocabulary};
use index::{EmbeddingIndex, SearchMode};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub dim: usize,
    /// Initialization scale; mean-pooled dot-product scores need a
    /// non-vanishing dynamic range to give the contrastive warm start
    /// usable gradients.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Query => "ret.q",
            Side::Document => "ret.d",
        }
    }
}

/// Query encoder f_x and document encoder f_z over one parameter store Φ.
/// Each side is an embedding table, mean pooling, and a linear projection
/// into the shared `dim`-dimensional space. Scores are bilinear in token
/// counts, which matches the additive structure of bag-of-words relevance
/// and transfers across contexts that reshuffle the same tokens.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = config.init_std;
        for side in [Side::Query, Side::Document] {
            let p = side.prefix();
            params.insert_randn(
                &format!("{p}.emb"),
                &[config.vocab_size, config.emb_dim],
                std,
                &mut rng,
            )?;
            params.insert_randn(&format!("{p}.w"), &[config.emb_dim, config.dim], std, &mut rng)?;
            params.insert_zeros(&format!("{p}.b"), &[config.dim])?;
        }
        Ok(DualEncoder { config, params })
    }

    /// Differentiable encode on an existing tape/binding: embed, mean-pool,
    /// project. Returns a `dim`-vector var.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        side: Side,
        ids: &[TokenId],
    ) -> Result<VarId> {
        if ids.is_empty() {
            return Err(CoreError::Retrieval("cannot encode an empty token sequence".into()));
        }
        let p = side.prefix();
        let emb = tape.embedding(binding.var(&format!("{p}.emb"))?, ids)?;
        let pooled = tape.mean_rows(emb)?;
        let row = tape.reshape(pooled, &[1, self.config.emb_dim])?;
        let out = tape.matmul(row, binding.var(&format!("{p}.w"))?)?;
        let out = tape.add_row(out, binding.var(&format!("{p}.b"))?)?;
        Ok(tape.reshape(out, &[self.config.dim])?)
    }

    fn encode_value(&self, side: Side, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let v = self.encode_on_tape(&mut tape, &binding, side, ids)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn encode_query(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        self.encode_value(Side::Query, ids)
    }

    pub fn encode_document(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        self.encode_value(Side::Document, ids)
    }

    pub fn save(&self, path: &std::path::Path, header: &serde_json::Value) -> Result<()> {
        let mut h = header.clone();
        h["encoder_config"] = serde_json::to_value(self.config)?;
        retgen_numeric::save_checkpoint(path, &h, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, params) = retgen_numeric::load_checkpoint(path)?;
        let config: EncoderConfig = serde_json::from_value(
            header
                .get("encoder_config")
                .cloned()
                .ok_or_else(|| CoreError::Retrieval("checkpoint missing encoder_config".into()))?,
        )?;
        let probe = DualEncoder { config, params };
        probe.validate_shapes()?;
        Ok(probe)
    }

    fn validate_shapes(&self) -> Result<()> {
        let c = self.config;
        for side in [Side::Query, Side::Document] {
            let p = side.prefix();
            let checks = [
                (format!("{p}.emb"), vec![c.vocab_size, c.emb_dim]),
                (format!("{p}.w"), vec![c.emb_dim, c.dim]),
                (format!("{p}.b"), vec![c.dim]),
            ];
            for (name, shape) in checks {
                let t = &self.params.get(&name)?.tensor;
                if t.shape() != shape.as_slice() {
                    return Err(CoreError::Retrieval(format!(
                        "checkpoint shape mismatch for `{name}`: {:?} vs config {:?}",
                        t.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Exact inner product; the relevance score s(x, z).
pub fn score(h_x: &[f64], h_z: &[f64]) -> Result<f64> {
    if h_x.len() != h_z.len() {
        return Err(CoreError::Retrieval(format!(
            "score: dimension mismatch {} vs {}",
            h_x.len(),
            h_z.len()
        )));
    }
    Ok(h_x.iter().zip(h_z).map(|(a, b)| a * b).sum())
}

/// Top-K documents with fresh scores and their softmax normalization.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub doc_indices: Vec<usize>,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.doc_indices.len()
    }
}

/// Encode every document and bucket the embeddings.
pub fn build_index(
    docs: &DocumentStore,
    vocab: &Vocabulary,
    encoder: &DualEncoder,
    tables: usize,
    bits: usize,
    seed: u64,
    snapshot_step: u64,
) -> Result<EmbeddingIndex> {
    if docs.is_empty() {
        return Err(CoreError::Retrieval("cannot index an empty document store".into()));
    }
    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut embeddings = Vec::with_capacity(docs.len());
    for d in docs.iter() {
        doc_ids.push(d.id.clone());
        embeddings.push(encoder.encode_document(&vocab.encode(&d.tokens))?);
    }
    EmbeddingIndex::build(doc_ids, embeddings, tables, bits, seed, snapshot_step)
}

/// Rebuild embeddings and tables iff the snapshot is at least
/// `refresh_every` steps old. Scores downstream are fresh either way.
pub fn refresh_if_due(
    index: &mut EmbeddingIndex,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    encoder: &DualEncoder,
    current_step: u64,
    refresh_every: u64,
) -> Result<bool> {
    if current_step.saturating_sub(index.snapshot_step) < refresh_every.max(1) {
        return Ok(false);
    }
    let rebuilt = build_index(
        docs,
        vocab,
        encoder,
        index.tables,
        index.bits,
        index.seed,
        current_step,
    )?;
    *index = rebuilt;
    Ok(true)
}

/// Candidate selection through the (possibly stale) index, then fresh
/// scores from the current encoder for exactly the selected documents.
pub fn retrieve(
    encoder: &DualEncoder,
    index: &EmbeddingIndex,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    k: usize,
    mode: SearchMode,
) -> Result<RetrievalResult> {
    let h_x = encoder.encode_query(x)?;
    let selected = index.search(&h_x, k, mode)?;

    let mut entries: Vec<(usize, String, f64)> = Vec::with_capacity(selected.len());
    for (idx, _stale_score) in selected {
        let doc = docs.get(idx);
        let h_z = encoder.encode_document(&vocab.encode(&doc.tokens))?;
        entries.push((idx, doc.id.clone(), score(&h_x, &h_z)?));
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(&b.1))
    });

    let scores: Vec<f64> = entries.iter().map(|e| e.2).collect();
    let probs = softmax_vec(&scores);
    Ok(RetrievalResult {
        doc_indices: entries.iter().map(|e| e.0).collect(),
        doc_ids: entries.iter().map(|e| e.1.clone()).collect(),
        scores,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::corpus::{Document, DocumentStore};
    use crate::text::Vocabulary;
    use std::collections::HashMap;

    fn tiny_vocab() -> Vocabulary {
        let mut freqs = HashMap::new();
        for w in ["alpha", "beta", "gamma", "delta"] {
            freqs.insert(w.to_string(), 5);
        }
        Vocabulary::build(&freqs, 1).unwrap()
    }

    fn tiny_encoder(vocab: &Vocabulary) -> DualEncoder {
        DualEncoder::new(
            EncoderConfig { vocab_size: vocab.len(), emb_dim: 8, hidden_dim: 8, dim: 8, init_std: 0.3 },
            3,
        )
        .unwrap()
    }

    #[test]
    fn score_hand_values() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(
            score(&[0.5, -1.0], &[2.0, 3.0]).unwrap(),
            score(&[2.0, 3.0], &[0.5, -1.0]).unwrap()
        );
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identical_inputs_identical_vectors() {
        let vocab = tiny_vocab();
        let enc = tiny_encoder(&vocab);
        let ids = vocab.encode_text("alpha beta");
        assert_eq!(enc.encode_query(&ids).unwrap(), enc.encode_query(&ids).unwrap());
        assert_eq!(enc.encode_query(&ids).unwrap().len(), 8);
    }

    #[test]
    fn empty_sequence_rejected() {
        let vocab = tiny_vocab();
        let enc = tiny_encoder(&vocab);
        assert!(enc.encode_query(&[]).is_err());
        assert!(enc.encode_document(&[]).is_err());
    }

    #[test]
    fn encoder_checkpoint_roundtrip_validates_shapes() {
        let vocab = tiny_vocab();
        let enc = tiny_encoder(&vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ret.ckpt");
        enc.save(&path, &serde_json::json!({"seed": 0})).unwrap();
        let loaded = DualEncoder::load(&path).unwrap();
        assert_eq!(loaded.config, enc.config);
        let ids = vocab.encode_text("gamma");
        assert_eq!(loaded.encode_query(&ids).unwrap(), enc.encode_query(&ids).unwrap());
    }

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            title: id.into(),
            tokens: crate::text::tokenize(text),
            raw_text: text.into(),
        }
    }

    #[test]
    fn retrieve_reports_fresh_scores() {
        let vocab = tiny_vocab();
        let enc = tiny_encoder(&vocab);
        let docs = DocumentStore::from_documents(vec![
            doc("d0", "alpha beta"),
            doc("d1", "gamma delta"),
            doc("d2", "alpha delta"),
        ])
        .unwrap();
        let index = build_index(&docs, &vocab, &enc, 4, 4, 9, 0).unwrap();

        // mutate Φ after indexing: the index is now stale
        let mut enc2 = enc.clone();
        enc2.params.get_mut("ret.d.b").unwrap().tensor.data_mut()[0] += 0.5;

        let x = vocab.encode_text("alpha");
        let result = retrieve(&enc2, &index, &docs, &vocab, &x, 2, SearchMode::Exhaustive).unwrap();
        let h_x = enc2.encode_query(&x).unwrap();
        for (i, &idx) in result.doc_indices.iter().enumerate() {
            let h_z = enc2.encode_document(&vocab.encode(&docs.get(idx).tokens)).unwrap();
            let fresh = score(&h_x, &h_z).unwrap();
            assert!((result.scores[i] - fresh).abs() < 1e-12);
        }
        let sum: f64 = result.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(result.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn refresh_schedule_respects_period() {
        let vocab = tiny_vocab();
        let enc = tiny_encoder(&vocab);
        let docs =
            DocumentStore::from_documents(vec![doc("d0", "alpha beta"), doc("d1", "gamma")])
                .unwrap();
        let mut index = build_index(&docs, &vocab, &enc, 2, 4, 1, 0).unwrap();

        assert!(!refresh_if_due(&mut index, &docs, &vocab, &enc, 199, 200).unwrap());
        assert_eq!(index.snapshot_step, 0);
        assert!(refresh_if_due(&mut index, &docs, &vocab, &enc, 200, 200).unwrap());
        assert_eq!(index.snapshot_step, 200);
        // M = 1 rebuilds every step
        assert!(refresh_if_due(&mut index, &docs, &vocab, &enc, 201, 1).unwrap());
        assert_eq!(index.snapshot_step, 201);
    }
}
