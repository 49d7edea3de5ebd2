//! Retrieval invariants over random ensembles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retgen_core::eval::recall_at_k;
use retgen_core::retriever::index::{EmbeddingIndex, SearchMode};
use retgen_core::retriever::{build_index, retrieve, DualEncoder, EncoderConfig};
use retgen_core::text::corpus::{make_synthetic_grounded_corpus, SyntheticConfig};
use retgen_core::text::Vocabulary;
use retgen_numeric::softmax_vec;

#[test]
fn probs_invariant_to_constant_score_shift() {
    let scores = vec![1.2, -0.4, 0.9, 0.0];
    let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
    let a = softmax_vec(&scores);
    let b = softmax_vec(&shifted);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn recall_is_one_when_k_is_pool_size_and_low_for_random_init() {
    let synth = SyntheticConfig {
        n_docs: 40,
        vocab_size: 250,
        key_len: 2,
        fact_len: 2,
        n_examples: 60,
        distractor_len: 3,
    };
    let (corpus, docs) = make_synthetic_grounded_corpus(&synth, 3).unwrap();
    let mut texts: Vec<String> = corpus.iter().map(|e| e.context.join(" ")).collect();
    texts.extend(docs.iter().map(|d| d.raw_text.clone()));
    let vocab = Vocabulary::build(&Vocabulary::count_tokens(texts.into_iter()), 1).unwrap();
    let enc = DualEncoder::new(
        EncoderConfig { vocab_size: vocab.len(), emb_dim: 8, dim: 8, init_std: 0.3 },
        11,
    )
    .unwrap();
    let index = build_index(&docs, &vocab, &enc, 4, 4, 1, 0).unwrap();

    let (recall_full, skipped) =
        recall_at_k(&enc, &index, &docs, &vocab, &corpus, docs.len(), SearchMode::Exhaustive)
            .unwrap();
    assert_eq!(recall_full, 1.0);
    assert_eq!(skipped, 0);

    // random-init retriever: recall@1 near 1/n_docs, well under 0.25
    let (recall_1, _) =
        recall_at_k(&enc, &index, &docs, &vocab, &corpus, 1, SearchMode::Exhaustive).unwrap();
    assert!(recall_1 < 0.25, "random-init recall@1 = {recall_1}");

    // monotone in K
    let (recall_5, _) =
        recall_at_k(&enc, &index, &docs, &vocab, &corpus, 5, SearchMode::Exhaustive).unwrap();
    assert!(recall_5 >= recall_1);

    // pairs with ids missing from the pool are skipped with a counter
    let mut broken = corpus.clone();
    broken[0].oracle_doc_id = Some("nonexistent".into());
    let (_, skipped) =
        recall_at_k(&enc, &index, &docs, &vocab, &broken, 1, SearchMode::Exhaustive).unwrap();
    assert_eq!(skipped, 1);
}

#[test]
fn lsh_overlap_reasonable_on_random_unit_vectors() {
    // small-scale version of the oracle comparison; the acceptance suite
    // runs the full 1k x 100-query benchmark
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 300;
    let dim = 16;
    let embs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let ids: Vec<String> = (0..n).map(|i| format!("doc{:04}", i)).collect();
    let index = EmbeddingIndex::build(ids, embs, 16, 6, 5, 0).unwrap();

    let mut overlap_sum = 0.0;
    let queries = 30;
    for _ in 0..queries {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ex = index.search(&q, 10, SearchMode::Exhaustive).unwrap();
        let lsh = index.search(&q, 10, SearchMode::Lsh).unwrap();
        let ex_set: std::collections::HashSet<usize> = ex.iter().map(|e| e.0).collect();
        overlap_sum +=
            lsh.iter().filter(|e| ex_set.contains(&e.0)).count() as f64 / 10.0;
    }
    let mean = overlap_sum / queries as f64;
    assert!(mean >= 0.7, "mean top-10 overlap {mean} too low at L=16");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_probs_always_simplex(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..12);
        let dim = rng.random_range(2..6);
        let embs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("d{:03}", i)).collect();
        let index = EmbeddingIndex::build(ids, embs, 4, 3, seed, 0).unwrap();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = rng.random_range(1..=n);
        let top = index.search(&q, k, SearchMode::Lsh).unwrap();
        prop_assert_eq!(top.len(), k);
        let scores: Vec<f64> = top.iter().map(|e| e.1).collect();
        let probs = softmax_vec(&scores);
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        // ids distinct
        let mut seen = std::collections::HashSet::new();
        for e in &top {
            prop_assert!(seen.insert(e.0));
        }
    }
}

#[test]
fn fresh_scores_differentiable_grad_matches_fd() {
    // gradient of s(x, z) w.r.t. Φ against central differences
    use retgen_numeric::{finite_difference_grad, max_relative_error, Tape, Tensor};
    use std::collections::BTreeMap;

    let enc = DualEncoder::new(
        EncoderConfig { vocab_size: 20, emb_dim: 6, dim: 6, init_std: 0.3 },
        77,
    )
    .unwrap();
    let x = vec![1usize, 4, 9];
    let z = vec![2usize, 3];

    let mut tape = Tape::new();
    let binding = enc.params.bind(&mut tape).unwrap();
    let hx = enc
        .encode_on_tape(&mut tape, &binding, retgen_core::retriever::Side::Query, &x)
        .unwrap();
    let hz = enc
        .encode_on_tape(&mut tape, &binding, retgen_core::retriever::Side::Document, &z)
        .unwrap();
    let s = tape.dot(hx, hz).unwrap();
    let auto = tape.backward(s).unwrap();
    let auto_map: BTreeMap<String, Tensor> =
        auto.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let numeric = finite_difference_grad(
        |params| {
            let probe = DualEncoder { config: enc.config, params: params.clone() };
            let hx = probe.encode_query(&x).expect("encode");
            let hz = probe.encode_document(&z).expect("encode");
            Ok(hx.iter().zip(&hz).map(|(a, b)| a * b).sum())
        },
        &enc.params,
        1e-5,
    )
    .unwrap();
    let err = max_relative_error(&auto_map, &numeric);
    assert!(err < 1e-4, "score gradient mismatch: {err}");
}
