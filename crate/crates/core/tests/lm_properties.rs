use chanlab::lm::gradcheck::{check_gradients, OwnedView};
use chanlab::lm::handbuilt::{bigram_lm, random_lm, uniform_lm, BigramTable};
use chanlab::lm::{
    compute_gradients, conditional_logprob, next_token_logprobs, GradientSubset, LmConfig, LmView,
    PrefixCache, TokenSeq, TrainPair, Vocab,
};
use ndarray::Array2;
use proptest::prelude::*;

fn small_config() -> LmConfig {
    LmConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        max_seq_len: 32,
        vocab_size: 12,
        seed: 3,
    }
}

fn pairs() -> Vec<TrainPair> {
    vec![
        TrainPair {
            context: TokenSeq(vec![5, 6, 7]),
            target: TokenSeq(vec![8, 9]),
        },
        TrainPair {
            context: TokenSeq(vec![10]),
            target: TokenSeq(vec![4, 11, 5]),
        },
        TrainPair {
            context: TokenSeq(vec![]),
            target: TokenSeq(vec![7]),
        },
    ]
}

#[test]
fn empty_continuation_is_zero() {
    let p = random_lm(&small_config(), 0.3).unwrap();
    let lp = conditional_logprob(&LmView::base(&p), 1, &TokenSeq(vec![4, 5]), &TokenSeq::new()).unwrap();
    assert_eq!(lp, 0.0);
}

#[test]
fn uniform_lm_gives_log_quarter_per_token() {
    let vocab = Vocab::from_corpus(&["w x y z"]).unwrap();
    let p = uniform_lm(&vocab, 1, 2, 8, 16).unwrap();
    let view = LmView::base(&p);
    let x = vocab.tokenize("w").unwrap();
    let y = vocab.tokenize("y z").unwrap();
    let lp = conditional_logprob(&view, vocab.bos(), &x, &y).unwrap();
    assert!((lp - 2.0 * 0.25f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn bigram_table_product() {
    // tokens: 0 pad, 1 bos, 2 null, 3 a, 4 b
    let mut t = BigramTable::uniform(5);
    t.set_row(3, &[(4, 0.5)]).unwrap();
    t.set_row(4, &[(4, 0.25)]).unwrap();
    let p = bigram_lm(&t, 2, 2, 16).unwrap();
    let lp = conditional_logprob(&LmView::base(&p), 1, &TokenSeq(vec![3]), &TokenSeq(vec![4, 4])).unwrap();
    assert!((lp - 0.125f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn sequence_overflow_is_a_length_error() {
    let p = random_lm(&small_config(), 0.1).unwrap();
    let long = TokenSeq(vec![4; 31]);
    let err = conditional_logprob(&LmView::base(&p), 1, &long, &TokenSeq(vec![5])).unwrap_err();
    assert!(matches!(err, chanlab::Error::Length { .. }), "{err}");
}

#[test]
fn next_token_distribution_normalizes() {
    let p = random_lm(&small_config(), 0.5).unwrap();
    for prefix in [vec![], vec![4], vec![7, 8, 9, 10, 11]] {
        let lp = next_token_logprobs(&LmView::base(&p), 1, &TokenSeq(prefix)).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn causality_later_tokens_do_not_affect_earlier_scores() {
    let p = random_lm(&small_config(), 0.5).unwrap();
    let view = LmView::base(&p);
    let base = TokenSeq(vec![4, 5, 6, 7, 8]);
    for t in 0..base.len() {
        let mut changed = base.clone();
        changed.0[t] = 11;
        for pos in 0..=t {
            let prefix_a = TokenSeq(base.0[..pos].to_vec());
            let prefix_b = TokenSeq(changed.0[..pos].to_vec());
            let a = next_token_logprobs(&view, 1, &prefix_a).unwrap();
            let b = next_token_logprobs(&view, 1, &prefix_b).unwrap();
            assert_eq!(a, b, "position {pos} changed by token {t}");
        }
    }
}

#[test]
fn prefix_cache_matches_direct_computation() {
    let p = random_lm(&small_config(), 0.4).unwrap();
    let mut owned = OwnedView::new(p);
    owned.prompts = Some(Array2::from_shape_fn((3, 16), |(i, j)| ((i * 7 + j) as f64).sin()));
    owned.transform = Some(Array2::from_shape_fn((16, 16), |(i, j)| if i == j { 1.1 } else { 0.01 * (i as f64 - j as f64) }));
    let view = owned.view();
    let prefix = TokenSeq(vec![4, 5, 6]);
    let cache = PrefixCache::new(view, 1, &prefix).unwrap();
    let conts = [TokenSeq(vec![7]), TokenSeq(vec![8, 9, 10]), TokenSeq::new(), TokenSeq(vec![11, 4])];
    let refs: Vec<&TokenSeq> = conts.iter().collect();
    let cached = cache.logprobs(&refs).unwrap();
    for (c, got) in conts.iter().zip(cached) {
        let direct = conditional_logprob(&view, 1, &prefix, c).unwrap();
        assert!((direct - got).abs() < 1e-12, "{direct} vs {got}");
    }
    let ext = cache.extend(&TokenSeq(vec![9, 9])).unwrap();
    let a = ext.logprob(&TokenSeq(vec![5, 6])).unwrap();
    let b = conditional_logprob(&view, 1, &TokenSeq(vec![4, 5, 6, 9, 9]), &TokenSeq(vec![5, 6])).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn degenerate_lm_has_zero_gradient() {
    // constant final hidden state e0 and a head that puts logit 1000 on
    // token 4: softmax is exactly one-hot in f64
    let mut p = random_lm(&small_config(), 0.3).unwrap();
    p.lnf_gain.fill(0.0);
    p.lnf_bias.fill(0.0);
    p.lnf_bias[0] = 1.0;
    p.untie();
    let head = p.head_mut().unwrap();
    head.fill(0.0);
    head[[4, 0]] = 1000.0;
    let mut owned = OwnedView::new(p);
    let batch = vec![TrainPair {
        context: TokenSeq(vec![5]),
        target: TokenSeq(vec![4, 4]),
    }];
    let g = compute_gradients(&owned.view(), 1, &batch, GradientSubset::HeadOnly).unwrap();
    assert!(g.loss.abs() < 1e-9);
    assert!(g.grads.max_abs() < 1e-9);
    owned.transform = Some(Array2::eye(owned.params.config.model_dim));
    let g = compute_gradients(&owned.view(), 1, &batch, GradientSubset::TransformOnly).unwrap();
    assert!(g.grads.max_abs() < 1e-9);
}

fn gradcheck_model() -> OwnedView {
    let p = random_lm(&small_config(), 0.3).unwrap();
    let mut m = OwnedView::new(p);
    m.params.untie();
    m
}

#[test]
fn gradients_match_finite_differences_for_every_subset() {
    let base = gradcheck_model();
    let h = base.params.config.model_dim;
    let mut head = base.clone();
    head.head = Some(head.params.head().clone() + 0.05);
    let mut transform = base.clone();
    transform.transform = Some(Array2::eye(h) + Array2::from_shape_fn((h, h), |(i, j)| 0.05 * ((i * h + j) as f64).cos()));
    let mut prompt = base.clone();
    prompt.prompts = Some(Array2::from_shape_fn((4, h), |(i, j)| 0.4 * ((i + 3 * j) as f64).sin()));
    let mut all = OwnedView::new(random_lm(&small_config(), 0.3).unwrap());
    all.params.untie();
    let tied_all = OwnedView::new(random_lm(&small_config(), 0.3).unwrap());
    for (m, subset) in [
        (&head, GradientSubset::HeadOnly),
        (&base, GradientSubset::HeadOnly),
        (&transform, GradientSubset::TransformOnly),
        (&prompt, GradientSubset::PromptEmbeddingsOnly),
        (&all, GradientSubset::AllParams),
        (&tied_all, GradientSubset::AllParams),
    ] {
        let report = check_gradients(m, 1, &pairs(), subset, 100, 11).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn gradients_cover_only_the_selected_subset() {
    let mut m = gradcheck_model();
    m.prompts = Some(Array2::zeros((2, 16)));
    let g = compute_gradients(&m.view(), 1, &pairs(), GradientSubset::PromptEmbeddingsOnly).unwrap();
    assert!(g.grads.prompts.is_some());
    assert!(g.grads.head.is_none() && g.grads.transform.is_none() && g.grads.params.is_none());
    let err = compute_gradients(&m.view(), 1, &pairs(), GradientSubset::TransformOnly).unwrap_err();
    assert!(matches!(err, chanlab::Error::Config(_)));
}

#[test]
fn head_features_match_full_gradients() {
    let mut m = gradcheck_model();
    m.head = Some(m.params.head().clone());
    let batch = pairs();
    let feats = chanlab::lm::HeadFeatures::compute(&m.view(), 1, &batch).unwrap();
    let fast = feats.gradients(&m.view(), &[0, 1, 2], GradientSubset::HeadOnly).unwrap();
    let full = compute_gradients(&m.view(), 1, &batch, GradientSubset::HeadOnly).unwrap();
    assert!((fast.loss - full.loss).abs() < 1e-12);
    let diff = (fast.grads.head.unwrap() - full.grads.head.unwrap()).mapv(f64::abs);
    assert!(diff.iter().all(|&d| d < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chain_rule_holds(
        prefix in proptest::collection::vec(3u32..12, 0..5),
        y1 in proptest::collection::vec(3u32..12, 0..4),
        y2 in proptest::collection::vec(3u32..12, 0..4),
    ) {
        let p = random_lm(&small_config(), 0.4).unwrap();
        let view = LmView::base(&p);
        let x = TokenSeq(prefix);
        let a = TokenSeq(y1);
        let b = TokenSeq(y2);
        let joint = conditional_logprob(&view, 1, &x, &TokenSeq::concat(&[&a, &b])).unwrap();
        let first = conditional_logprob(&view, 1, &x, &a).unwrap();
        let second = conditional_logprob(&view, 1, &TokenSeq::concat(&[&x, &a]), &b).unwrap();
        prop_assert!((joint - first - second).abs() < 1e-9);
        prop_assert!(joint <= 0.0);
    }
}
