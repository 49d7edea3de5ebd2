//! Evaluation metrics: keyword matching ratio, multi-reference BLEU,
//! distinct-n, n-gram entropy, retrieval recall, and the report emitter.
//!
//! All text metrics operate on normalized word tokens; KMR uses pure
//! stopword-filtered set semantics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::retriever::index::{EmbeddingIndex, SearchMode};
use crate::retriever::{retrieve, DualEncoder};
use crate::text::corpus::{CorpusExample, DocumentStore};
use crate::text::{StopwordList, Vocabulary};

/// Keyword Matching Ratio for one document:
/// K-words = set(z) \ set(x); KMR = |set(y_hat) ∩ K-words| / |K-words|.
/// All three sets are stopword-filtered bags of words. Returns None when
/// the document yields no K-words.
pub fn kmr_single(
    hypothesis: &[String],
    context: &[String],
    doc_tokens: &[String],
    stopwords: &StopwordList,
) -> Option<f64> {
    let z = stopwords.filter_set(doc_tokens.iter());
    let x = stopwords.filter_set(context.iter());
    let y = stopwords.filter_set(hypothesis.iter());
    let kwords: HashSet<&String> = z.iter().filter(|w| !x.contains(*w)).collect();
    if kwords.is_empty() {
        return None;
    }
    let matched = kwords.iter().filter(|w| y.contains(**w)).count();
    Some(matched as f64 / kwords.len() as f64)
}

/// Max-pooled KMR over a document set. Documents with empty K-words are
/// skipped; if every document is skipped the instance is undefined.
pub fn kmr(
    hypothesis: &[String],
    context: &[String],
    docs: &[&[String]],
    stopwords: &StopwordList,
) -> Result<Option<f64>> {
    if docs.is_empty() {
        return Err(CoreError::Evaluation("kmr needs at least one document".into()));
    }
    let mut best: Option<f64> = None;
    for doc in docs {
        if let Some(v) = kmr_single(hypothesis, context, doc, stopwords) {
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    Ok(best)
}

/// Corpus-level KMR: per-instance max-pooled scores averaged over defined
/// instances, with an undefined-instance counter.
pub fn kmr_corpus(
    hypotheses: &[Vec<String>],
    contexts: &[Vec<String>],
    doc_sets: &[Vec<Vec<String>>],
    stopwords: &StopwordList,
) -> Result<(f64, usize)> {
    if hypotheses.len() != contexts.len() || hypotheses.len() != doc_sets.len() {
        return Err(CoreError::Evaluation("kmr_corpus: misaligned inputs".into()));
    }
    let mut sum = 0.0;
    let mut defined = 0usize;
    let mut undefined = 0usize;
    for ((hyp, ctx), docs) in hypotheses.iter().zip(contexts).zip(doc_sets) {
        let refs: Vec<&[String]> = docs.iter().map(|d| d.as_slice()).collect();
        match kmr(hyp, ctx, &refs, stopwords)? {
            Some(v) => {
                sum += v;
                defined += 1;
            }
            None => undefined += 1,
        }
    }
    let mean = if defined > 0 { sum / defined as f64 } else { f64::NAN };
    Ok((mean, undefined))
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<&str>> {
    if tokens.len() < n || n == 0 {
        return vec![];
    }
    tokens.windows(n).map(|w| w.iter().map(String::as_str).collect()).collect()
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut counts = HashMap::new();
    for gram in ngrams(tokens, n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Cumulative corpus BLEU with standard multi-reference clipping and
/// brevity penalty (closest reference length, shorter on ties).
#[derive(Debug, Clone, Serialize)]
pub struct BleuScore {
    /// Modified n-gram precisions p_1..p_max.
    pub precisions: Vec<f64>,
    /// Cumulative BLEU-n for each order (geometric mean of p_1..p_n times BP).
    pub cumulative: Vec<f64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

impl BleuScore {
    pub fn score(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }
}

pub fn bleu(
    hypotheses: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    max_order: usize,
) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(CoreError::Evaluation("bleu over an empty hypothesis list".into()));
    }
    if hypotheses.len() != reference_sets.len() {
        return Err(CoreError::Evaluation(format!(
            "bleu: {} hypotheses vs {} reference sets",
            hypotheses.len(),
            reference_sets.len()
        )));
    }
    if max_order == 0 {
        return Err(CoreError::Evaluation("bleu max_order must be >= 1".into()));
    }
    let mut matched = vec![0u64; max_order];
    let mut total = vec![0u64; max_order];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refs) in hypotheses.iter().zip(reference_sets) {
        if refs.is_empty() {
            return Err(CoreError::Evaluation("bleu: an instance has no references".into()));
        }
        hyp_len += hyp.len();
        // closest reference length; ties go to the shorter reference
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        ref_len += closest;
        for n in 1..=max_order {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, u64> = HashMap::new();
            for r in refs {
                for (gram, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (gram, c) in &hyp_counts {
                total[n - 1] += c;
                matched[n - 1] += (*c).min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let precisions: Vec<f64> = (0..max_order)
        .map(|i| if total[i] > 0 { matched[i] as f64 / total[i] as f64 } else { 0.0 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let cumulative: Vec<f64> = (1..=max_order)
        .map(|n| {
            if precisions[..n].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let log_mean: f64 = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
                brevity_penalty * log_mean.exp()
            }
        })
        .collect();
    Ok(BleuScore {
        precisions,
        cumulative,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
    })
}

/// Sentence-level max-pooling for multi-reference sets: per instance,
/// score against each reference separately, keep the best, and average
/// the per-instance maxima over the corpus.
pub fn bleu_max_pooled(
    hypotheses: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    max_order: usize,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(CoreError::Evaluation("bleu over an empty hypothesis list".into()));
    }
    let mut sum = 0.0;
    for (hyp, refs) in hypotheses.iter().zip(reference_sets) {
        let mut best = 0.0_f64;
        for r in refs {
            let s = bleu(
                std::slice::from_ref(hyp),
                &[vec![r.clone()]],
                max_order,
            )?
            .score();
            best = best.max(s);
        }
        sum += best;
    }
    Ok(sum / hypotheses.len() as f64)
}

/// Dist-n: unique n-grams / total n-grams over the whole corpus.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::Evaluation("distinct_n needs n >= 1".into()));
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for hyp in hypotheses {
        for gram in ngrams(hyp, n) {
            total += 1;
            unique.insert(gram);
        }
    }
    if total == 0 {
        return Err(CoreError::Evaluation(format!(
            "distinct_n undefined: no hypothesis has {n} tokens"
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Entropy-n: Shannon entropy (natural log) of the corpus n-gram
/// frequency distribution.
pub fn entropy_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::Evaluation("entropy_n needs n >= 1".into()));
    }
    let mut counts: HashMap<Vec<&str>, u64> = HashMap::new();
    let mut total = 0u64;
    for hyp in hypotheses {
        for gram in ngrams(hyp, n) {
            *counts.entry(gram).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(CoreError::Evaluation(format!(
            "entropy_n undefined: no hypothesis has {n} tokens"
        )));
    }
    let total_f = total as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / total_f;
            -p * p.ln()
        })
        .sum())
}

/// Exhaustive-mode recall@K over labeled (context, oracle doc) pairs.
/// Pairs whose oracle id is missing from the pool are skipped and counted.
pub fn recall_at_k(
    encoder: &DualEncoder,
    index: &EmbeddingIndex,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    pairs: &[CorpusExample],
    k: usize,
    mode: SearchMode,
) -> Result<(f64, usize)> {
    let mut hits = 0usize;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for ex in pairs {
        let Some(oracle) = ex.oracle_doc_id.as_deref() else {
            skipped += 1;
            continue;
        };
        if docs.index_of(oracle).is_none() {
            skipped += 1;
            continue;
        }
        let x = vocab.encode(&ex.context);
        let result = retrieve(encoder, index, docs, vocab, &x, k, mode)?;
        scored += 1;
        if result.doc_ids.iter().any(|id| id == oracle) {
            hits += 1;
        }
    }
    if scored == 0 {
        return Err(CoreError::Evaluation("recall_at_k: no scorable pairs".into()));
    }
    Ok((hits as f64 / scored as f64, skipped))
}

/// Metric report: scalar metrics, counters, and a config echo.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn set_metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn set_count(&mut self, name: &str, value: u64) {
        self.counts.insert(name.to_string(), value);
    }

    pub fn set_config(&mut self, name: &str, value: impl ToString) {
        self.config.insert(name.to_string(), value.to_string());
    }

    pub fn validate_ranges(&self) -> Result<()> {
        for (name, &v) in &self.metrics {
            let in_unit = (0.0..=1.0).contains(&v);
            let ok = if name.starts_with("entropy") {
                v >= 0.0
            } else if name.starts_with("loss") || name.starts_with("reward") {
                v.is_finite()
            } else {
                in_unit || v.is_nan()
            };
            if !ok {
                return Err(CoreError::Evaluation(format!("metric {name}={v} out of range")));
            }
        }
        Ok(())
    }

    /// Machine-parsable text: one `name<TAB>value<TAB>count` line per
    /// metric, followed by counters and config echo lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.metrics {
            out.push_str(&format!("metric\t{name}\t{value}\n"));
        }
        for (name, value) in &self.counts {
            out.push_str(&format!("count\t{name}\t{value}\n"));
        }
        for (name, value) in &self.config {
            out.push_str(&format!("config\t{name}\t{value}\n"));
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        retgen_numeric::atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}
