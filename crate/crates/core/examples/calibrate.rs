//! Calibration probe for the synthetic joint-training setup: reports
//! timing, loss curves, recall, and KMR so training hyperparameters can
//! be pinned with margin.

use std::time::Instant;

use retgen_core::decoder::{decode_with_retrieval, DecodeConfig};
use retgen_core::eval::{kmr, recall_at_k};
use retgen_core::generator::{GenConfig, GroundedLM};
use retgen_core::retriever::index::SearchMode;
use retgen_core::retriever::{build_index, retrieve, DualEncoder, EncoderConfig};
use retgen_core::text::corpus::{make_synthetic_grounded_corpus, SyntheticConfig};
use retgen_core::text::{StopwordList, Vocabulary};
use retgen_core::trainer::{
    pretrain_generator_oracle, train, train_baseline_generator, warm_start_retriever,
    ControlVariate, EstimatorMode, JointConfig,
};

fn main() {
    let seed: u64 = std::env::var("RETGEN_CAL_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(11);
    let synth = SyntheticConfig {
        n_docs: 100,
        vocab_size: 900,
        key_len: 2,
        fact_len: std::env::var("RETGEN_CAL_FACTS").ok().and_then(|s| s.parse().ok()).unwrap_or(3),
        n_examples: 2200,
        distractor_len: 6,
        foreign_distractors: 2,
    };
    let t0 = Instant::now();
    let (all, docs) = make_synthetic_grounded_corpus(&synth, seed).unwrap();
    let (corpus, valid) = all.split_at(2000);
    let mut texts: Vec<String> = all.iter().map(|e| e.context.join(" ")).collect();
    texts.extend(all.iter().map(|e| e.target.join(" ")));
    texts.extend(docs.iter().map(|d| d.raw_text.clone()));
    let vocab = Vocabulary::build(&Vocabulary::count_tokens(texts.into_iter()), 1).unwrap();
    println!("setup: vocab={} docs={} t={:?}", vocab.len(), docs.len(), t0.elapsed());

    let gen_config = GenConfig {
        vocab_size: vocab.len(),
        layers: 2,
        heads: 2,
        dim: 32,
        ff_dim: 64,
        doc_pos_offset: 64,
        max_doc: 12,
        max_context: 12,
        max_target: 8,
    };
    let enc_config =
        EncoderConfig { vocab_size: vocab.len(), emb_dim: 32, dim: 32, init_std: 0.3 };

    let gen = GroundedLM::new(gen_config, seed + 1).unwrap();
    let mut enc = DualEncoder::new(enc_config, seed + 2).unwrap();

    // random-init recall
    let index0 = build_index(&docs, &vocab, &enc, 16, 8, seed, 0).unwrap();
    let (recall_rand, _) =
        recall_at_k(&enc, &index0, &docs, &vocab, valid, 1, SearchMode::Exhaustive).unwrap();
    println!("recall@1 random-init: {recall_rand:.3}");

    // warm start
    let t1 = Instant::now();
    let warm_steps: u64 = std::env::var("RETGEN_CAL_WARM").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    let warm_losses =
        warm_start_retriever(&mut enc, corpus, &docs, &vocab, warm_steps, 32, 3e-3, seed).unwrap();
    println!(
        "warm start {warm_steps} steps: loss {:.3} -> {:.3}, t={:?}",
        warm_losses.first().unwrap(),
        warm_losses.last().unwrap(),
        t1.elapsed()
    );
    let index_warm = build_index(&docs, &vocab, &enc, 16, 8, seed, 0).unwrap();
    let (recall_warm, _) =
        recall_at_k(&enc, &index_warm, &docs, &vocab, valid, 1, SearchMode::Exhaustive).unwrap();
    let (recall_warm4, _) =
        recall_at_k(&enc, &index_warm, &docs, &vocab, valid, 4, SearchMode::Exhaustive).unwrap();
    println!("recall@1 warm: {recall_warm:.3}, recall@4 warm: {recall_warm4:.3}");

    // joint training
    let config = JointConfig {
        k: 4,
        refresh_every: 200,
        batch_size: 2,
        lr_generator: 1e-3,
        lr_retriever: std::env::var("RETGEN_CAL_LRRET").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        max_steps: 2000,
        seed,
        control_variate: ControlVariate::ExpectedReward,
        estimator: EstimatorMode::Autodiff,
        search_mode: SearchMode::Lsh,
        freeze_retriever: false,
        freeze_generator: false,
        eval_every: 250,
        threads: 1,
        index_tables: 16,
        index_bits: 8,
    };

    // generator warm start: grounded pretraining on oracle documents
    let t15 = Instant::now();
    let mut pre_cfg = config.clone();
    pre_cfg.max_steps = std::env::var("RETGEN_CAL_PRE").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    pre_cfg.batch_size = 16;
    let (gen, pre_metrics) =
        pretrain_generator_oracle(gen, corpus, &docs, &vocab, &pre_cfg).unwrap();
    println!(
        "gen pretrain 500 steps: loss {:.3} -> {:.3}, t={:?}",
        pre_metrics.first().unwrap().loss,
        pre_metrics.last().unwrap().loss,
        t15.elapsed()
    );

    // diagnostic: posterior-minus-prior mass on the oracle among top-4
    let diagnose = |tag: &str, g: &GroundedLM, e: &DualEncoder, slice: &[retgen_core::text::corpus::CorpusExample]| {
        let idx = build_index(&docs, &vocab, e, 16, 8, seed, 0).unwrap();
        let mut hit4 = 0usize;
        let mut hit1 = 0usize;
        let mut gap_sum = 0.0;
        let mut gap_n = 0usize;
        for ex in slice {
            let x = vocab.encode(&ex.context);
            let mut y = vocab.encode(&ex.target);
            y.push(retgen_core::text::EOS);
            let r = retrieve(e, &idx, &docs, &vocab, &x, 4, SearchMode::Exhaustive).unwrap();
            let oracle = ex.oracle_doc_id.as_deref().unwrap();
            if r.doc_ids[0] == oracle {
                hit1 += 1;
            }
            if let Some(pos) = r.doc_ids.iter().position(|d| d == oracle) {
                hit4 += 1;
                let logps: Vec<f64> = r
                    .doc_indices
                    .iter()
                    .map(|&i| g.log_prob(&vocab.encode(&docs.get(i).tokens), &x, &y).unwrap())
                    .collect();
                let joint: Vec<f64> =
                    logps.iter().zip(&r.probs).map(|(l, p)| l + p.ln()).collect();
                let posterior = retgen_numeric::softmax_vec(&joint);
                gap_sum += posterior[pos] - r.probs[pos];
                gap_n += 1;
            }
        }
        println!(
            "  [{tag}] r@1 {:.3} r@4 {:.3} mean(posterior-prior | oracle retrieved) {:.4}",
            hit1 as f64 / slice.len() as f64,
            hit4 as f64 / slice.len() as f64,
            gap_sum / gap_n.max(1) as f64
        );
    };
    diagnose("pre-joint train", &gen, &enc, &corpus[..100]);
    diagnose("pre-joint valid", &gen, &enc, &valid[..100]);

    let t2 = Instant::now();
    let (state, metrics, evals) =
        train(gen.clone(), enc.clone(), corpus, &docs, &vocab, &config, Some(valid))
            .unwrap();
    diagnose("post-joint train", &state.generator, &state.encoder, &corpus[..100]);
    diagnose("post-joint valid", &state.generator, &state.encoder, &valid[..100]);
    let norms = |e: &DualEncoder| {
        let mut v: Vec<f64> = docs
            .iter()
            .map(|d| {
                let h = e.encode_document(&vocab.encode(&d.tokens)).unwrap();
                h.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (v[0], v[v.len() / 2], v[v.len() - 1])
    };
    let (lo_a, med_a, hi_a) = norms(&enc);
    let (lo_b, med_b, hi_b) = norms(&state.encoder);
    println!("doc norms pre-joint  min/med/max: {lo_a:.2} {med_a:.2} {hi_a:.2}");
    println!("doc norms post-joint min/med/max: {lo_b:.2} {med_b:.2} {hi_b:.2}");
    println!("joint 2000 steps: t={:?}", t2.elapsed());
    let early: f64 =
        metrics.iter().take(50).map(|m| m.loss).sum::<f64>() / 50.0;
    let late: f64 =
        metrics.iter().rev().take(50).map(|m| m.loss).sum::<f64>() / 50.0;
    println!("train loss step-50 avg {early:.3} -> last-50 avg {late:.3}");
    for e in &evals {
        println!(
            "  eval step {:>4}: loss {:.3} reward {:.4} recall@1 {:?}",
            e.step, e.loss, e.expected_reward, e.recall_at_1
        );
    }

    // baseline generator without retrieval, trained identically:
    // 500 pretraining steps + 2000 main steps, all with an empty document
    let t3 = Instant::now();
    let fresh = GroundedLM::new(gen_config, seed + 1).unwrap();
    let (baseline, _) = train_baseline_generator(fresh, corpus, &vocab, &pre_cfg).unwrap();
    let (baseline, bmetrics) =
        train_baseline_generator(baseline, corpus, &vocab, &config).unwrap();
    println!("baseline 500+2000 steps: t={:?}", t3.elapsed());
    println!(
        "baseline loss {:.3} -> {:.3}",
        bmetrics.iter().take(50).map(|m| m.loss).sum::<f64>() / 50.0,
        bmetrics.iter().rev().take(50).map(|m| m.loss).sum::<f64>() / 50.0
    );

    // KMR comparison on 100 validation contexts
    let stopwords = StopwordList::builtin();
    let decode_cfg = DecodeConfig { k: 4, max_len: 10, seed, ..DecodeConfig::default() };
    let mut kmr_joint = Vec::new();
    let mut kmr_base = Vec::new();
    let mut kmr_k1 = Vec::new();
    let mut kmr_base_oracle = Vec::new();
    let t4 = Instant::now();
    for ex in &valid[..100] {
        let x = vocab.encode(&ex.context);
        let retrieval = retrieve(
            &state.encoder,
            &state.index,
            &docs,
            &vocab,
            &x,
            4,
            SearchMode::Exhaustive,
        )
        .unwrap();
        let doc_tokens: Vec<Vec<String>> = retrieval
            .doc_indices
            .iter()
            .map(|&i| docs.get(i).tokens.clone())
            .collect();
        let doc_refs: Vec<&[String]> = doc_tokens.iter().map(|d| d.as_slice()).collect();

        let out =
            decode_with_retrieval(&state.generator, &docs, &vocab, &x, &retrieval, &decode_cfg)
                .unwrap();
        let hyp = vocab.decode(&out.tokens);
        if let Some(v) = kmr(&hyp, &ex.context, &doc_refs, &stopwords).unwrap() {
            kmr_joint.push(v);
        }

        let mut k1_cfg = decode_cfg.clone();
        k1_cfg.k = 1;
        let r1 = retrieve(
            &state.encoder,
            &state.index,
            &docs,
            &vocab,
            &x,
            1,
            SearchMode::Exhaustive,
        )
        .unwrap();
        let out1 =
            decode_with_retrieval(&state.generator, &docs, &vocab, &x, &r1, &k1_cfg).unwrap();
        let hyp1 = vocab.decode(&out1.tokens);
        let d1: Vec<Vec<String>> =
            r1.doc_indices.iter().map(|&i| docs.get(i).tokens.clone()).collect();
        let dr1: Vec<&[String]> = d1.iter().map(|d| d.as_slice()).collect();
        if let Some(v) = kmr(&hyp1, &ex.context, &dr1, &stopwords).unwrap() {
            kmr_k1.push(v);
        }

        // baseline: no retrieval; generate from context alone, score
        // against the same top-4 docs
        let mut prefix: Vec<usize> = Vec::new();
        while prefix.len() < 10 {
            let dist = baseline.next_token_dist(&[], &x, &prefix).unwrap();
            let mut best = 0;
            for (i, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = i;
                }
            }
            if best == retgen_core::text::EOS {
                break;
            }
            prefix.push(best);
        }
        let bhyp = vocab.decode(&prefix);
        if let Some(v) = kmr(&bhyp, &ex.context, &doc_refs, &stopwords).unwrap() {
            kmr_base.push(v);
        }
        // oracle-doc semantics for the no-retrieval baseline
        let oracle = docs.by_id(ex.oracle_doc_id.as_deref().unwrap()).unwrap();
        let oref: Vec<&[String]> = vec![&oracle.tokens];
        if let Some(v) = kmr(&bhyp, &ex.context, &oref, &stopwords).unwrap() {
            kmr_base_oracle.push(v);
        }
    }
    println!("decode+kmr over 100 contexts: t={:?}", t4.elapsed());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "KMR joint(K=4) {:.3} | K=1 {:.3} | baseline(vs retrieved) {:.3} | baseline(vs oracle) {:.3}",
        mean(&kmr_joint),
        mean(&kmr_k1),
        mean(&kmr_base),
        mean(&kmr_base_oracle)
    );
    let final_recall = evals.last().unwrap().recall_at_1.unwrap();
    println!(
        "SUMMARY: recall rand {recall_rand:.3} warm {recall_warm:.3} joint {final_recall:.3}; loss drop {:.1}%",
        100.0 * (1.0 - late / early)
    );
    println!("total: {:?}", t0.elapsed());
}
