//! Joint optimization of the generator and retriever.
//!
//! The generator trains on the negative log of the top-K marginal
//! likelihood. The retriever trains through freshly recomputed scores for
//! the retrieved documents: the index only selects candidates, and both
//! update routes (plain autodiff through the marginal, or the
//! score-function estimator with a control variate) operate on fresh
//! scores. The two routes agree exactly on the fixed top-K set, which the
//! estimator tests pin down.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retgen_numeric::{
    softmax_vec, AdamConfig, AdamState, Gradients, Tape, Tensor, VarId,
};

use crate::error::{CoreError, Result};
use crate::generator::GroundedLM;
use crate::retriever::index::{EmbeddingIndex, SearchMode};
use crate::retriever::{build_index, refresh_if_due, retrieve, DualEncoder, RetrievalResult};
use crate::text::corpus::{CorpusExample, DocumentStore};
use crate::text::{TokenId, Vocabulary, EOS};
use crate::util::ordered_parallel_map;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlVariate {
    ExpectedReward,
    Zero,
    /// Arbitrary fixed baseline; exists to demonstrate baseline invariance.
    Constant(f64),
}

impl ControlVariate {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expected_reward" => Ok(ControlVariate::ExpectedReward),
            "zero" => Ok(ControlVariate::Zero),
            other => Err(CoreError::Training(format!("unknown control variate `{other}`"))),
        }
    }

    pub fn value(&self, rewards: &[f64], probs: &[f64]) -> f64 {
        match self {
            ControlVariate::ExpectedReward => {
                rewards.iter().zip(probs).map(|(r, p)| r * p).sum()
            }
            ControlVariate::Zero => 0.0,
            ControlVariate::Constant(c) => *c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    Autodiff,
    ActorCritic,
}

impl EstimatorMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(EstimatorMode::Autodiff),
            "actor_critic" => Ok(EstimatorMode::ActorCritic),
            other => Err(CoreError::Training(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointConfig {
    pub k: usize,
    pub refresh_every: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_retriever: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub control_variate: ControlVariate,
    pub estimator: EstimatorMode,
    pub search_mode: SearchMode,
    pub freeze_retriever: bool,
    pub freeze_generator: bool,
    pub eval_every: u64,
    pub threads: usize,
    pub index_tables: usize,
    pub index_bits: usize,
}

impl JointConfig {
    pub fn from_run_config(rc: &crate::config::RunConfig) -> Result<Self> {
        Ok(JointConfig {
            k: rc.train.k,
            refresh_every: rc.train.refresh_every,
            batch_size: rc.train.batch_size,
            lr_generator: rc.train.lr_generator,
            lr_retriever: rc.train.lr_retriever,
            max_steps: rc.train.max_steps,
            seed: rc.seed,
            control_variate: ControlVariate::parse(&rc.train.control_variate)?,
            estimator: EstimatorMode::parse(&rc.train.estimator)?,
            search_mode: SearchMode::Lsh,
            freeze_retriever: false,
            freeze_generator: false,
            eval_every: rc.train.eval_every,
            threads: rc.threads,
            index_tables: rc.index.tables,
            index_bits: rc.index.bits,
        })
    }
}

/// Per-example record of the quantities in the retriever update: rewards
/// p(y|z_k, x), probabilities p(z_k|x), the baseline C, and the marginal.
#[derive(Debug, Clone)]
pub struct RewardRecord {
    pub rewards: Vec<f64>,
    pub probs: Vec<f64>,
    pub baseline: f64,
    pub marginal: f64,
}

/// Training target: the example target plus the end-of-sequence token.
pub fn encode_target(example: &CorpusExample, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut y = vocab.encode(&example.target);
    y.push(EOS);
    y
}

struct JointForward {
    loss: f64,
    grads: Gradients,
    record: RewardRecord,
}

/// One example's joint tape: per-doc log-likelihoods, fresh scores, and
/// the negative log marginal, with gradients when a side is trainable.
fn joint_forward(
    gen: &GroundedLM,
    enc: &DualEncoder,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    y: &[TokenId],
    retrieval: &RetrievalResult,
    cv: ControlVariate,
    train_generator: bool,
    train_retriever: bool,
) -> Result<JointForward> {
    if retrieval.k() == 0 {
        return Err(CoreError::Training("marginal over zero retrieved documents".into()));
    }
    let mut tape = Tape::new();
    let gen_binding = if train_generator {
        gen.params.bind(&mut tape)?
    } else {
        gen.params.bind_frozen(&mut tape)?
    };
    let enc_binding = if train_retriever {
        enc.params.bind(&mut tape)?
    } else {
        enc.params.bind_frozen(&mut tape)?
    };

    let h_x = enc.encode_on_tape(&mut tape, &enc_binding, crate::retriever::Side::Query, x)?;
    let mut logprob_vars: Vec<VarId> = Vec::with_capacity(retrieval.k());
    let mut score_vars: Vec<VarId> = Vec::with_capacity(retrieval.k());
    for &idx in &retrieval.doc_indices {
        let z = vocab.encode(&docs.get(idx).tokens);
        logprob_vars.push(gen.log_prob_on_tape(&mut tape, &gen_binding, &z, x, y)?);
        let h_z =
            enc.encode_on_tape(&mut tape, &enc_binding, crate::retriever::Side::Document, &z)?;
        score_vars.push(tape.dot(h_x, h_z)?);
    }
    let scores = tape.concat_1d(&score_vars)?;
    let log_probs_ret = tape.log_softmax(scores)?;
    let logprobs_gen = tape.concat_1d(&logprob_vars)?;
    let joint = tape.add(logprobs_gen, log_probs_ret)?;
    let lse = tape.logsumexp(joint)?;
    let loss_var = tape.scale(lse, -1.0)?;
    let loss = tape.value(loss_var).scalar_value()?;
    if !loss.is_finite() {
        return Err(CoreError::Training(format!(
            "non-finite marginal loss (all rewards vanished): docs {:?}, log p(y|z,x) {:?}, scores {:?}",
            retrieval.doc_ids,
            tape.value(logprobs_gen).data(),
            tape.value(scores).data()
        )));
    }

    let rewards: Vec<f64> = tape.value(logprobs_gen).data().iter().map(|l| l.exp()).collect();
    let probs = softmax_vec(tape.value(scores).data());
    let marginal = (-loss).exp();
    let baseline = cv.value(&rewards, &probs);
    let grads = if train_generator || train_retriever {
        tape.backward(loss_var)?
    } else {
        Gradients::default()
    };
    Ok(JointForward { loss, grads, record: RewardRecord { rewards, probs, baseline, marginal } })
}

/// The approximated loss: -log sum_k p(y|x, z_k) p(z_k|x), with fresh
/// scores for the given retrieval. Returns the loss and the per-document
/// reward record.
pub fn marginal_nll(
    gen: &GroundedLM,
    enc: &DualEncoder,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    y: &[TokenId],
    retrieval: &RetrievalResult,
    cv: ControlVariate,
) -> Result<(f64, RewardRecord)> {
    let fwd = joint_forward(gen, enc, docs, vocab, x, y, retrieval, cv, false, false)?;
    Ok((fwd.loss, fwd.record))
}

/// Score-function estimate of the gradient of p(y|x) w.r.t. Φ with the
/// top-K set held fixed:
///   sum_k [r_k - C] p_k ∇ log p_k  =  sum_k c_k ∇ s_k,
/// where c_k folds in the softmax Jacobian. Rewards are constants here —
/// the generator is held fixed for this estimate.
pub fn retriever_grad_ac(
    enc: &DualEncoder,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    retrieval: &RetrievalResult,
    rewards: &[f64],
    cv: ControlVariate,
) -> Result<Gradients> {
    if rewards.len() != retrieval.k() {
        return Err(CoreError::Training(format!(
            "{} rewards for {} retrieved documents",
            rewards.len(),
            retrieval.k()
        )));
    }
    let mut tape = Tape::new();
    let binding = enc.params.bind(&mut tape)?;
    let h_x = enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Query, x)?;
    let mut score_vars = Vec::with_capacity(retrieval.k());
    for &idx in &retrieval.doc_indices {
        let z = vocab.encode(&docs.get(idx).tokens);
        let h_z = enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Document, &z)?;
        score_vars.push(tape.dot(h_x, h_z)?);
    }
    let scores = tape.concat_1d(&score_vars)?;
    let probs = softmax_vec(tape.value(scores).data());
    let c = cv.value(rewards, &probs);

    // surrogate sum_k c_k s_k whose gradient is the literal estimator:
    // d/dΦ log p_k = ∇s_k - sum_j p_j ∇s_j folded into coefficients
    let advantages: Vec<f64> =
        rewards.iter().zip(&probs).map(|(r, p)| (r - c) * p).collect();
    let adv_total: f64 = advantages.iter().sum();
    let coeffs: Vec<f64> = advantages
        .iter()
        .zip(&probs)
        .map(|(w, p)| w - p * adv_total)
        .collect();
    let coeff_leaf = tape.leaf(Tensor::vector(coeffs));
    let surrogate = tape.dot(coeff_leaf, scores)?;
    Ok(tape.backward(surrogate)?)
}

/// Autodiff oracle for the estimator: the gradient of
/// sum_k r_k softmax_k(s(Φ)) with rewards as constants.
pub fn retriever_grad_marginal_autodiff(
    enc: &DualEncoder,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    x: &[TokenId],
    retrieval: &RetrievalResult,
    rewards: &[f64],
) -> Result<Gradients> {
    let mut tape = Tape::new();
    let binding = enc.params.bind(&mut tape)?;
    let h_x = enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Query, x)?;
    let mut score_vars = Vec::with_capacity(retrieval.k());
    for &idx in &retrieval.doc_indices {
        let z = vocab.encode(&docs.get(idx).tokens);
        let h_z = enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Document, &z)?;
        score_vars.push(tape.dot(h_x, h_z)?);
    }
    let scores = tape.concat_1d(&score_vars)?;
    let probs = tape.softmax(scores)?;
    let reward_leaf = tape.leaf(Tensor::vector(rewards.to_vec()));
    let weighted = tape.mul(reward_leaf, probs)?;
    let marginal = tape.sum(weighted)?;
    Ok(tape.backward(marginal)?)
}

/// In-batch contrastive warm start on (x, oracle document) pairs: batch
/// score matrix, diagonal as the positive class. Returns the loss curve.
pub fn warm_start_retriever(
    enc: &mut DualEncoder,
    corpus: &[CorpusExample],
    docs: &DocumentStore,
    vocab: &Vocabulary,
    steps: u64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let labeled: Vec<&CorpusExample> = corpus
        .iter()
        .filter(|e| e.oracle_doc_id.as_deref().is_some_and(|id| docs.index_of(id).is_some()))
        .collect();
    if labeled.is_empty() {
        return Err(CoreError::Training(
            "warm start requires examples with oracle document ids".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut adam = AdamState::new(AdamConfig::with_lr(lr));
    let mut losses = Vec::with_capacity(steps as usize);

    for _ in 0..steps {
        // fill a batch with distinct oracle documents
        let mut batch: Vec<&CorpusExample> = Vec::with_capacity(batch_size);
        let mut seen: Vec<&str> = Vec::with_capacity(batch_size);
        let mut scanned = 0;
        while batch.len() < batch_size && scanned < 2 * labeled.len() {
            if cursor >= order.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            let ex = labeled[order[cursor]];
            cursor += 1;
            scanned += 1;
            let oracle = ex.oracle_doc_id.as_deref().unwrap();
            if !seen.contains(&oracle) {
                seen.push(oracle);
                batch.push(ex);
            }
        }
        if batch.len() < 2 {
            return Err(CoreError::Training(
                "warm start needs at least two distinct oracle documents".into(),
            ));
        }

        let mut tape = Tape::new();
        let binding = enc.params.bind(&mut tape)?;
        let mut q_rows = Vec::with_capacity(batch.len());
        let mut d_rows = Vec::with_capacity(batch.len());
        for ex in &batch {
            let x = vocab.encode(&ex.context);
            let q = enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Query, &x)?;
            q_rows.push(tape.reshape(q, &[1, enc.config.dim])?);
            let doc = docs.by_id(ex.oracle_doc_id.as_deref().unwrap()).unwrap();
            let z = vocab.encode(&doc.tokens);
            let d =
                enc.encode_on_tape(&mut tape, &binding, crate::retriever::Side::Document, &z)?;
            d_rows.push(tape.reshape(d, &[1, enc.config.dim])?);
        }
        let hx = tape.concat_rows(&q_rows)?;
        let hz = tape.concat_rows(&d_rows)?;
        let hz_t = tape.transpose(hz)?;
        let scores = tape.matmul(hx, hz_t)?;
        let targets: Vec<usize> = (0..batch.len()).collect();
        let nll = tape.cross_entropy_sum(scores, &targets)?;
        let loss = tape.scale(nll, 1.0 / batch.len() as f64)?;
        losses.push(tape.value(loss).scalar_value()?);
        let grads = tape.backward(loss)?;
        adam.step(&mut enc.params, &grads)?;
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: GroundedLM,
    pub encoder: DualEncoder,
    pub index: EmbeddingIndex,
    pub adam_gen: AdamState,
    pub adam_ret: AdamState,
    pub step: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub expected_reward: f64,
    pub millis: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
    pub expected_reward: f64,
    pub recall_at_1: Option<f64>,
}

fn split_grads(all: Gradients) -> (Gradients, Gradients) {
    let mut gen = Gradients::default();
    let mut ret = Gradients::default();
    for (name, g) in all.iter() {
        if name.starts_with("gen.") {
            gen.insert(name.clone(), g.clone());
        } else {
            ret.insert(name.clone(), g.clone());
        }
    }
    (gen, ret)
}

/// One optimization step over a batch: retrieve top-K with fresh scores,
/// update Θ on the marginal loss, update Φ by the configured estimator,
/// then refresh the index if its snapshot is due.
pub fn train_step(
    state: &mut TrainState,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    batch: &[CorpusExample],
    config: &JointConfig,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let gen = &state.generator;
    let enc = &state.encoder;
    let index = &state.index;

    type PerExample = Result<(f64, Gradients, RewardRecord, Option<Gradients>)>;
    let results: Vec<PerExample> = ordered_parallel_map(batch, config.threads, |ex| {
        let x = vocab.encode(&ex.context);
        let y = encode_target(ex, vocab);
        let retrieval = retrieve(enc, index, docs, vocab, &x, config.k, config.search_mode)?;
        let train_ret_on_tape =
            !config.freeze_retriever && config.estimator == EstimatorMode::Autodiff;
        let fwd = joint_forward(
            gen,
            enc,
            docs,
            vocab,
            &x,
            &y,
            &retrieval,
            config.control_variate,
            !config.freeze_generator,
            train_ret_on_tape,
        )?;
        let ac = if !config.freeze_retriever && config.estimator == EstimatorMode::ActorCritic {
            // ∇Φ(-log p) = -(∇Φ p) / p
            let mut g = retriever_grad_ac(
                enc,
                docs,
                vocab,
                &x,
                &retrieval,
                &fwd.record.rewards,
                config.control_variate,
            )?;
            g.scale(-1.0 / fwd.record.marginal);
            Some(g)
        } else {
            None
        };
        Ok((fwd.loss, fwd.grads, fwd.record, ac))
    });

    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut gen_grads = Gradients::default();
    let mut ret_grads = Gradients::default();
    for item in results {
        let (loss, grads, record, ac) = item.map_err(|e| {
            CoreError::Training(format!("step {}: {e}", state.step))
        })?;
        loss_sum += loss;
        reward_sum += record.marginal;
        let (g, r) = split_grads(grads);
        gen_grads.add_scaled(&g, scale);
        ret_grads.add_scaled(&r, scale);
        if let Some(ac) = ac {
            ret_grads.add_scaled(&ac, scale);
        }
    }

    if !config.freeze_generator {
        state.adam_gen.step(&mut state.generator.params, &gen_grads)?;
    }
    if !config.freeze_retriever && !ret_grads.is_empty() {
        state.adam_ret.step(&mut state.encoder.params, &ret_grads)?;
    }
    state.step += 1;
    refresh_if_due(
        &mut state.index,
        docs,
        vocab,
        &state.encoder,
        state.step,
        config.refresh_every,
    )?;

    Ok(StepMetrics {
        step: state.step,
        loss: loss_sum * scale,
        expected_reward: reward_sum * scale,
        millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Teacher-forced evaluation of a validation slice: marginal loss,
/// expected reward sum_k p(y|z_k,x) p(z_k|x) over the exhaustive top-K,
/// and recall@1 where oracle ids exist.
pub fn evaluate_slice(
    gen: &GroundedLM,
    enc: &DualEncoder,
    index: &EmbeddingIndex,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    slice: &[CorpusExample],
    k: usize,
    step: u64,
    threads: usize,
) -> Result<EvalPoint> {
    type PerExample = Result<(f64, f64, Option<bool>)>;
    let results: Vec<PerExample> = ordered_parallel_map(slice, threads, |ex| {
        let x = vocab.encode(&ex.context);
        let y = encode_target(ex, vocab);
        let retrieval = retrieve(enc, index, docs, vocab, &x, k, SearchMode::Exhaustive)?;
        let (loss, record) = marginal_nll(
            gen,
            enc,
            docs,
            vocab,
            &x,
            &y,
            &retrieval,
            ControlVariate::ExpectedReward,
        )?;
        let hit = ex
            .oracle_doc_id
            .as_deref()
            .filter(|id| docs.index_of(id).is_some())
            .map(|id| retrieval.doc_ids[0] == id);
        Ok((loss, record.marginal, hit))
    });
    let mut loss_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut hits = 0usize;
    let mut labeled = 0usize;
    let n = results.len();
    for item in results {
        let (loss, reward, hit) = item?;
        loss_sum += loss;
        reward_sum += reward;
        if let Some(h) = hit {
            labeled += 1;
            if h {
                hits += 1;
            }
        }
    }
    Ok(EvalPoint {
        step,
        loss: loss_sum / n.max(1) as f64,
        expected_reward: reward_sum / n.max(1) as f64,
        recall_at_1: (labeled > 0).then(|| hits as f64 / labeled as f64),
    })
}

/// Full joint training: seeded epoch shuffling, evaluation at step 0,
/// every `eval_every` steps, and at the end.
pub fn train(
    generator: GroundedLM,
    encoder: DualEncoder,
    corpus: &[CorpusExample],
    docs: &DocumentStore,
    vocab: &Vocabulary,
    config: &JointConfig,
    eval_slice: Option<&[CorpusExample]>,
) -> Result<(TrainState, Vec<StepMetrics>, Vec<EvalPoint>)> {
    if corpus.is_empty() {
        return Err(CoreError::Training("empty training corpus".into()));
    }
    let index = build_index(
        docs,
        vocab,
        &encoder,
        config.index_tables,
        config.index_bits,
        config.seed,
        0,
    )?;
    let mut state = TrainState {
        generator,
        encoder,
        index,
        adam_gen: AdamState::new(AdamConfig::with_lr(config.lr_generator)),
        adam_ret: AdamState::new(AdamConfig::with_lr(config.lr_retriever)),
        step: 0,
    };

    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let eval_now = |state: &TrainState, evals: &mut Vec<EvalPoint>| -> Result<()> {
        if let Some(slice) = eval_slice {
            evals.push(evaluate_slice(
                &state.generator,
                &state.encoder,
                &state.index,
                docs,
                vocab,
                slice,
                config.k,
                state.step,
                config.threads,
            )?);
        }
        Ok(())
    };
    eval_now(&state, &mut evals)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    while state.step < config.max_steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<CorpusExample> = order[cursor..cursor + config.batch_size]
            .iter()
            .map(|&i| corpus[i].clone())
            .collect();
        cursor += config.batch_size;
        metrics.push(train_step(&mut state, docs, vocab, &batch, config)?);
        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            eval_now(&state, &mut evals)?;
        }
    }
    if config.eval_every == 0 || state.step % config.eval_every != 0 {
        eval_now(&state, &mut evals)?;
    }
    Ok((state, metrics, evals))
}

/// Freeze Θ and fine-tune only Φ, monitoring recall and expected reward.
pub fn retriever_only_training(
    generator: GroundedLM,
    encoder: DualEncoder,
    corpus: &[CorpusExample],
    docs: &DocumentStore,
    vocab: &Vocabulary,
    config: &JointConfig,
    eval_slice: &[CorpusExample],
) -> Result<(TrainState, Vec<EvalPoint>)> {
    let mut cfg = config.clone();
    cfg.freeze_generator = true;
    cfg.freeze_retriever = false;
    let (state, _, evals) =
        train(generator, encoder, corpus, docs, vocab, &cfg, Some(eval_slice))?;
    Ok((state, evals))
}

/// Plain LM training of the generator with a per-example document chosen
/// by `doc_for`. Shared loop for the no-retrieval baseline (empty
/// document) and oracle-grounded pretraining.
fn train_generator_lm<F>(
    mut generator: GroundedLM,
    corpus: &[CorpusExample],
    vocab: &Vocabulary,
    config: &JointConfig,
    doc_for: F,
) -> Result<(GroundedLM, Vec<StepMetrics>)>
where
    F: Fn(&CorpusExample) -> Result<Vec<TokenId>> + Sync,
{
    if corpus.is_empty() {
        return Err(CoreError::Training("empty training corpus".into()));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr_generator));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut metrics = Vec::new();
    for step in 0..config.max_steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&CorpusExample> =
            order[cursor..cursor + config.batch_size].iter().map(|&i| &corpus[i]).collect();
        cursor += config.batch_size;

        let start = Instant::now();
        let gen_ref = &generator;
        let doc_for = &doc_for;
        type PerExample = Result<(f64, Gradients)>;
        let results: Vec<PerExample> = ordered_parallel_map(&batch, config.threads, |ex| {
            let x = vocab.encode(&ex.context);
            let y = encode_target(ex, vocab);
            let z = doc_for(ex)?;
            let mut tape = Tape::new();
            let binding = gen_ref.params.bind(&mut tape)?;
            let lp = gen_ref.log_prob_on_tape(&mut tape, &binding, &z, &x, &y)?;
            let loss = tape.scale(lp, -1.0)?;
            let value = tape.value(loss).scalar_value()?;
            Ok((value, tape.backward(loss)?))
        });
        let scale = 1.0 / batch.len() as f64;
        let mut loss_sum = 0.0;
        let mut grads = Gradients::default();
        for item in results {
            let (loss, g) = item?;
            loss_sum += loss;
            grads.add_scaled(&g, scale);
        }
        adam.step(&mut generator.params, &grads)?;
        metrics.push(StepMetrics {
            step: step + 1,
            loss: loss_sum * scale,
            expected_reward: (-(loss_sum * scale)).exp(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((generator, metrics))
}

/// No-retrieval ablation: the same generator trained on -log p(y | x)
/// with an empty document segment.
pub fn train_baseline_generator(
    generator: GroundedLM,
    corpus: &[CorpusExample],
    vocab: &Vocabulary,
    config: &JointConfig,
) -> Result<(GroundedLM, Vec<StepMetrics>)> {
    train_generator_lm(generator, corpus, vocab, config, |_| Ok(vec![]))
}

/// Grounded pretraining on oracle documents (the grounded-LM analog of
/// starting from a pretrained generator): -log p(y | x, z_oracle).
/// Gives the joint phase informative rewards from its first step.
pub fn pretrain_generator_oracle(
    generator: GroundedLM,
    corpus: &[CorpusExample],
    docs: &DocumentStore,
    vocab: &Vocabulary,
    config: &JointConfig,
) -> Result<(GroundedLM, Vec<StepMetrics>)> {
    if corpus.iter().all(|e| e.oracle_doc_id.is_none()) {
        return Err(CoreError::Training(
            "oracle-grounded pretraining requires oracle document ids".into(),
        ));
    }
    train_generator_lm(generator, corpus, vocab, config, |ex| {
        let id = ex
            .oracle_doc_id
            .as_deref()
            .ok_or_else(|| CoreError::Training(format!("example {} has no oracle id", ex.id)))?;
        let doc = docs
            .by_id(id)
            .ok_or_else(|| CoreError::Training(format!("oracle doc `{id}` not in store")))?;
        Ok(vocab.encode(&doc.tokens))
    })
}
