//! Sweep warm-start hyperparameters and report retrieval recall.

use retgen_core::eval::recall_at_k;
use retgen_core::retriever::index::SearchMode;
use retgen_core::retriever::{build_index, DualEncoder, EncoderConfig};
use retgen_core::text::corpus::{make_synthetic_grounded_corpus, SyntheticConfig};
use retgen_core::text::Vocabulary;
use retgen_core::trainer::warm_start_retriever;

fn main() {
    let seed = 11u64;
    let synth = SyntheticConfig {
        n_docs: 100,
        vocab_size: 600,
        key_len: 2,
        fact_len: 3,
        n_examples: 2200,
        distractor_len: 6,
        foreign_distractors: 2,
    };
    let (all, docs) = make_synthetic_grounded_corpus(&synth, seed).unwrap();
    let (corpus, valid) = all.split_at(2000);
    let mut texts: Vec<String> = all.iter().map(|e| e.context.join(" ")).collect();
    texts.extend(all.iter().map(|e| e.target.join(" ")));
    texts.extend(docs.iter().map(|d| d.raw_text.clone()));
    let vocab = Vocabulary::build(&Vocabulary::count_tokens(texts.into_iter()), 1).unwrap();

    for init_std in [0.3] {
        for lr in [3e-3, 1e-2] {
            for (steps, batch) in [(400u64, 16usize), (400, 32), (600, 32), (600, 48), (800, 48)] {
                let enc_config = EncoderConfig {
                    vocab_size: vocab.len(),
                    emb_dim: 32,

                    dim: 32,
                    init_std,
                };
                let mut enc = DualEncoder::new(enc_config, seed + 2).unwrap();
                let t = std::time::Instant::now();
                let losses = warm_start_retriever(
                    &mut enc, corpus, &docs, &vocab, steps, batch, lr, seed,
                )
                .unwrap();
                let index = build_index(&docs, &vocab, &enc, 16, 8, seed, 0).unwrap();
                let (r1, _) =
                    recall_at_k(&enc, &index, &docs, &vocab, valid, 1, SearchMode::Exhaustive)
                        .unwrap();
                let (r4, _) =
                    recall_at_k(&enc, &index, &docs, &vocab, valid, 4, SearchMode::Exhaustive)
                        .unwrap();
                println!(
                    "std {init_std:.1} lr {lr:.0e} steps {steps} batch {batch}: loss {:.3}->{:.3} r@1 {r1:.3} r@4 {r4:.3} t={:?}",
                    losses.first().unwrap(),
                    losses.last().unwrap(),
                    t.elapsed()
                );
            }
        }
    }
}
