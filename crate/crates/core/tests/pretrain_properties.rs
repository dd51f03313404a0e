use std::collections::HashMap;

use chanlab::datagen::{generate_synthetic_task, TaskKind};
use chanlab::lm::{build_vocab, pretrain, tokenize_corpus, LmConfig, PretrainOptions, DEFAULT_RESERVED};

fn config(vocab_size: usize) -> LmConfig {
    LmConfig {
        layers: 2,
        heads: 2,
        model_dim: 32,
        max_seq_len: 64,
        vocab_size,
        seed: 7,
    }
}

#[test]
fn memorizes_a_repeated_sentence() {
    let corpus = vec!["the quick film was great and the plot was fun"; 8];
    let vocab = build_vocab(&corpus, &DEFAULT_RESERVED).unwrap();
    let opts = PretrainOptions {
        steps: 500,
        batch_size: 4,
        ..PretrainOptions::default()
    };
    let out = pretrain(&config(vocab.len()), &vocab, &corpus, &opts).unwrap();
    assert!(out.params.is_tied());
    let last = out.losses[out.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last.exp() <= 1.5, "perplexity {}", last.exp());
}

#[test]
fn seeded_and_smoothly_decreasing_on_synthetic_corpus() {
    let task = generate_synthetic_task(TaskKind::BinarySentiment, 100, 4).unwrap();
    let corpus = &task.corpus[..400];
    let vocab = build_vocab(corpus, &DEFAULT_RESERVED).unwrap();
    let opts = PretrainOptions {
        steps: 300,
        batch_size: 8,
        ..PretrainOptions::default()
    };
    let cfg = LmConfig {
        max_seq_len: 384,
        ..config(vocab.len())
    };
    let a = pretrain(&cfg, &vocab, corpus, &opts).unwrap();
    let b = pretrain(&cfg, &vocab, corpus, &opts).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params.tensor_hashes(), b.params.tensor_hashes());
    assert!(a.params.is_tied());
    // 50-step moving averages, compared one window apart
    let avg: Vec<f64> = a.losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for i in (50..avg.len()).step_by(50) {
        assert!(avg[i] <= avg[i - 50] + 1e-9, "window {i}: {} > {}", avg[i], avg[i - 50]);
    }
    assert!(avg[avg.len() - 1] < avg[0] - 0.5);
}

#[test]
fn zero_steps_returns_seeded_init() {
    let corpus = ["a b c", "b c"];
    let vocab = build_vocab(&corpus, &DEFAULT_RESERVED).unwrap();
    let opts = PretrainOptions {
        steps: 0,
        ..PretrainOptions::default()
    };
    let out = pretrain(&config(vocab.len()), &vocab, &corpus, &opts).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.params, chanlab::lm::LmParams::init(&config(vocab.len())).unwrap());
    assert!(pretrain(&config(vocab.len() + 1), &vocab, &corpus, &opts).is_err());
}

#[test]
fn long_documents_are_windowed() {
    let doc = (0..150).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect::<Vec<_>>().join(" ");
    let vocab = build_vocab(&[doc.as_str()], &DEFAULT_RESERVED).unwrap();
    let docs = tokenize_corpus(&vocab, &[doc.as_str()], 64).unwrap();
    assert_eq!(docs.iter().map(|d| d.len()).collect::<Vec<_>>(), vec![63, 63, 24]);
    assert!(tokenize_corpus(&vocab, &["a z"], 64).is_err());
}

#[test]
fn vocabulary_matches_independent_word_count() {
    let task = generate_synthetic_task(TaskKind::BinarySentiment, 100, 0).unwrap();
    let corpus = &task.corpus[..1000];
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in corpus {
        for w in doc.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let vocab = build_vocab(corpus, &DEFAULT_RESERVED).unwrap();
    let extra_reserved = DEFAULT_RESERVED.iter().filter(|r| !counts.contains_key(*r)).count();
    assert_eq!(vocab.len(), counts.len() + extra_reserved);
    let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
    let by_freq = vocab.by_frequency();
    assert_eq!(vocab.frequency(by_freq[0]), *top.1);
    for (w, c) in &counts {
        assert_eq!(vocab.frequency(vocab.id(w).unwrap()), *c, "{w}");
    }
}
