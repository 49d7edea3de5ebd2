//! Multi-document Mixture-of-Experts decoding with retriever correction,
//! plus MMI hypothesis reranking.
//!
//! Each retrieved document drives its own copy of the generator on the
//! shared context and the shared consensus prefix; per-step next-token
//! distributions are mixed with document weights. With correction
//! enabled, the weight of document k at step t is
//! softmax_k( log p(z_k|x) + log p(y_{0:t-1}|z_k,x) ), which is exactly
//! the base probability multiplied by the correction factor
//! F_t = p(y_{0:t-1}|z,x) / sum_{z'} p(y_{0:t-1}|z',x) p(z'|x)
//! after renormalization.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use retgen_numeric::{logsumexp_slice, softmax_vec};

use crate::error::{CoreError, Result};
use crate::generator::GroundedLM;
use crate::retriever::index::{EmbeddingIndex, SearchMode};
use crate::retriever::{retrieve, DualEncoder, RetrievalResult};
use crate::text::corpus::DocumentStore;
use crate::text::{TokenId, Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub k: usize,
    pub mode: DecodeMode,
    pub max_len: usize,
    pub correction: bool,
    pub num_hypotheses: usize,
    pub sample_topk: usize,
    /// Score MMI by the mean of log-probabilities instead of the mean of
    /// probabilities.
    pub mmi_mean_of_logs: bool,
    pub seed: u64,
    pub search_mode: SearchMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 4,
            mode: DecodeMode::Greedy,
            max_len: 16,
            correction: true,
            num_hypotheses: 16,
            sample_topk: 10,
            mmi_mean_of_logs: false,
            seed: 0,
            search_mode: SearchMode::Exhaustive,
        }
    }
}

/// Running state of one decode: the consensus prefix, per-document prefix
/// log-likelihoods (maintained incrementally), and the base retrieval
/// probabilities.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub prefix: Vec<TokenId>,
    pub prefix_logp: Vec<f64>,
    pub base_probs: Vec<f64>,
    pub step: usize,
}

impl DecodeState {
    pub fn new(base_probs: Vec<f64>) -> Self {
        let k = base_probs.len();
        DecodeState { prefix: Vec::new(), prefix_logp: vec![0.0; k], base_probs, step: 0 }
    }

    /// Record a chosen token and fold each expert's probability of it into
    /// that expert's running prefix log-likelihood.
    pub fn push(&mut self, token: TokenId, per_doc_dists: &[Vec<f64>]) {
        for (logp, dist) in self.prefix_logp.iter_mut().zip(per_doc_dists) {
            *logp += dist[token].ln();
        }
        self.prefix.push(token);
        self.step += 1;
    }

    /// Mixture weights for the next step: base probabilities, or the
    /// correction-adjusted weights when enabled.
    pub fn weights(&self, correction: bool) -> Result<Vec<f64>> {
        if correction {
            Ok(correction_factor(self)?.1)
        } else {
            Ok(self.base_probs.clone())
        }
    }
}

/// Per-document correction factors F_t and the renormalized corrected
/// weights. Computed in log space; the literal formula and the softmax
/// formulation agree to floating-point accuracy.
pub fn correction_factor(state: &DecodeState) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.prefix_logp.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(CoreError::Generation(format!(
            "correction factor undefined at step {}: every per-document prefix probability underflowed",
            state.step
        )));
    }
    // log denominator: log sum_z' p(y_prefix|z',x) p(z'|x)
    let joint: Vec<f64> = state
        .prefix_logp
        .iter()
        .zip(&state.base_probs)
        .map(|(l, p)| l + p.ln())
        .collect();
    let log_denom = logsumexp_slice(&joint);
    let factors: Vec<f64> =
        state.prefix_logp.iter().map(|l| (l - log_denom).exp()).collect();
    let corrected = softmax_vec(&joint);
    Ok((factors, corrected))
}

/// Convex combination of per-expert next-token distributions.
pub fn moe_next_dist(weights: &[f64], dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != dists.len() || dists.is_empty() {
        return Err(CoreError::Generation(format!(
            "{} weights for {} expert distributions",
            weights.len(),
            dists.len()
        )));
    }
    let vocab = dists[0].len();
    if dists.iter().any(|d| d.len() != vocab) {
        return Err(CoreError::Generation("expert distributions disagree on vocabulary".into()));
    }
    let mut out = vec![0.0; vocab];
    for (w, dist) in weights.iter().zip(dists) {
        for (o, p) in out.iter_mut().zip(dist) {
            *o += w * p;
        }
    }
    Ok(out)
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

fn sample_topk(dist: &[f64], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        dist[b].partial_cmp(&dist[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k.max(1));
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let weights: Vec<f64> = order.iter().map(|&i| (dist[i].ln() / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return order[0];
    }
    let picker = WeightedIndex::new(&weights).expect("positive weights");
    order[picker.sample(rng)]
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    /// Sum of log mixture probabilities of the chosen tokens.
    pub forward_score: f64,
    pub retrieval: RetrievalResult,
    /// Corrected weights used at each step, for inspection output.
    pub weight_trace: Vec<Vec<f64>>,
}

/// MoE decode: retrieve once, then per step mix the K expert next-token
/// distributions under (optionally corrected) document weights.
pub fn decode(
    gen: &GroundedLM,
    enc: &DualEncoder,
    index: &EmbeddingIndex,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    let retrieval = retrieve(enc, index, docs, vocab, x, config.k, config.search_mode)?;
    decode_with_retrieval(gen, docs, vocab, x, &retrieval, config)
}

/// Decode against an already-retrieved document set.
pub fn decode_with_retrieval(
    gen: &GroundedLM,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    retrieval: &RetrievalResult,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    let doc_ids_tokens: Vec<Vec<TokenId>> = retrieval
        .doc_indices
        .iter()
        .map(|&idx| vocab.encode(&docs.get(idx).tokens))
        .collect();
    let mut state = DecodeState::new(retrieval.probs.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut forward_score = 0.0;
    let mut weight_trace = Vec::new();

    while state.prefix.len() < config.max_len {
        let weights = state.weights(config.correction)?;
        let dists: Vec<Vec<f64>> = doc_ids_tokens
            .iter()
            .map(|z| gen.next_token_dist(z, x, &state.prefix))
            .collect::<Result<_>>()?;
        let mixture = moe_next_dist(&weights, &dists)?;
        let token = match config.mode {
            DecodeMode::Greedy => argmax(&mixture),
            DecodeMode::TopK { k, temperature } => sample_topk(&mixture, k, temperature, &mut rng),
        };
        weight_trace.push(weights);
        forward_score += mixture[token].ln();
        if token == EOS {
            break;
        }
        state.push(token, &dists);
    }
    Ok(DecodeOutput {
        tokens: state.prefix,
        forward_score,
        retrieval: retrieval.clone(),
        weight_trace,
    })
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub forward_score: f64,
    pub backward_score: f64,
}

/// Top-k sample `num_hypotheses` candidates. Each hypothesis draws from
/// its own RNG stream, so changing their count never perturbs an
/// individual hypothesis.
pub fn generate_hypotheses(
    gen: &GroundedLM,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    retrieval: &RetrievalResult,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let mut hypotheses = Vec::with_capacity(config.num_hypotheses);
    for i in 0..config.num_hypotheses {
        let mut cfg = config.clone();
        cfg.mode = DecodeMode::TopK { k: config.sample_topk, temperature: 1.0 };
        cfg.seed = derive_stream_seed(config.seed, i as u64);
        let out = decode_with_retrieval(gen, docs, vocab, x, retrieval, &cfg)?;
        hypotheses.push(Hypothesis {
            tokens: out.tokens,
            forward_score: out.forward_score,
            backward_score: 0.0,
        });
    }
    Ok(hypotheses)
}

fn derive_stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over (seed, stream) for independent per-hypothesis streams
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Score each hypothesis with the backward model's p(x, z | y), averaged
/// over the K retrieved documents, and stable-sort best first. Ties fall
/// back to the forward score, then to generation order.
pub fn mmi_rerank(
    backward: &GroundedLM,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    retrieval: &RetrievalResult,
    mut hypotheses: Vec<Hypothesis>,
    mean_of_logs: bool,
) -> Result<Vec<Hypothesis>> {
    if hypotheses.is_empty() {
        return Err(CoreError::Generation("mmi_rerank needs at least one hypothesis".into()));
    }
    for hyp in &mut hypotheses {
        let mut logps = Vec::with_capacity(retrieval.k());
        for &idx in &retrieval.doc_indices {
            let z = vocab.encode(&docs.get(idx).tokens);
            logps.push(backward.backward_log_prob(&z, x, &hyp.tokens)?);
        }
        hyp.backward_score = if mean_of_logs {
            logps.iter().sum::<f64>() / logps.len() as f64
        } else {
            // log of the mean probability, via log-sum-exp for stability
            logsumexp_slice(&logps) - (logps.len() as f64).ln()
        };
    }
    hypotheses.sort_by(|a, b| {
        b.backward_score
            .partial_cmp(&a.backward_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.forward_score.partial_cmp(&a.forward_score).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(hypotheses)
}
