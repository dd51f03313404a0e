use chanlab::datagen::{Example, FewShotSet, SamplingSpec};
use chanlab::lm::handbuilt::{bigram_lm, random_lm, uniform_lm, BigramTable};
use chanlab::lm::{LmConfig, LmView, TokenId, TokenSeq, Vocab};
use chanlab::scoring::{
    build_context, score_reference, ClassScores, Method, Mode, Scorer, ScoringSpec, Verbalizer,
};
use chanlab::Error;

fn fewshot(labels: &[&str], pairs: &[(&str, usize)]) -> FewShotSet {
    FewShotSet {
        examples: pairs
            .iter()
            .map(|(t, l)| Example {
                text: t.to_string(),
                label: *l,
            })
            .collect(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
        provenance: SamplingSpec::uniform(pairs.len(), 0),
    }
}

fn ids(vocab: &Vocab, text: &str) -> Vec<TokenId> {
    vocab.tokenize(text).unwrap().0
}

/// Sum of table log-entries along `BOS, prefix, cont`, counting only the
/// continuation's transitions.
fn table_logprob(t: &BigramTable, bos: TokenId, prefix: &[TokenId], cont: &[TokenId]) -> f64 {
    let mut prev = *prefix.last().unwrap_or(&bos);
    let mut total = 0.0;
    for &y in cont {
        total += t.prob(prev, y).ln();
        prev = y;
    }
    total
}

struct Oracle {
    vocab: Vocab,
    table: BigramTable,
}

impl Oracle {
    fn new() -> Self {
        let vocab = Vocab::from_corpus(&["x1 x2 q great bad"]).unwrap();
        let id = |w: &str| vocab.id(w).unwrap();
        let (x1, x2, q, great, bad, nl, null) = (
            id("x1"),
            id("x2"),
            id("q"),
            id("great"),
            id("bad"),
            vocab.newline().unwrap(),
            vocab.null_marker(),
        );
        let mut table = BigramTable::uniform(vocab.len());
        table.set_row(vocab.bos(), &[(x1, 0.2), (q, 0.1), (great, 0.3), (bad, 0.15)]).unwrap();
        table.set_row(x1, &[(great, 0.5), (bad, 0.2)]).unwrap();
        table.set_row(x2, &[(great, 0.1), (bad, 0.6)]).unwrap();
        table.set_row(q, &[(great, 0.35), (bad, 0.4)]).unwrap();
        table.set_row(great, &[(nl, 0.3), (x1, 0.25), (q, 0.05), (x2, 0.1)]).unwrap();
        table.set_row(bad, &[(nl, 0.3), (x2, 0.3), (q, 0.2), (x1, 0.05)]).unwrap();
        table.set_row(nl, &[(x1, 0.2), (x2, 0.2), (great, 0.25), (bad, 0.15), (q, 0.1)]).unwrap();
        table.set_row(null, &[(great, 0.45), (bad, 0.2)]).unwrap();
        Self { vocab, table }
    }

    fn lp(&self, prefix: &[TokenId], cont: &[TokenId]) -> f64 {
        table_logprob(&self.table, self.vocab.bos(), prefix, cont)
    }
}

/// Every cell spelled out by hand from the scoring definitions, with
/// single-token inputs and verbalizers (so length normalization is a no-op).
fn hand_scores(o: &Oracle, method: Method, mode: Mode, demos: &[(TokenId, usize)], x: TokenId, verbs: &[TokenId]) -> Vec<f64> {
    let nl = o.vocab.newline().unwrap();
    let null = o.vocab.null_marker();
    let pair = |(dx, dl): (TokenId, usize)| match method {
        Method::Channel => vec![verbs[dl], dx],
        _ => vec![dx, verbs[dl]],
    };
    let blocks: Vec<Vec<TokenId>> = match mode {
        Mode::ZeroShot => vec![vec![]],
        Mode::Concat => vec![demos.iter().flat_map(|&d| {
            let mut p = pair(d);
            p.push(nl);
            p
        })
        .collect()],
        Mode::Ensemble => demos
            .iter()
            .map(|&d| {
                let mut p = pair(d);
                p.push(nl);
                p
            })
            .collect(),
    };
    verbs
        .iter()
        .map(|&v| {
            blocks
                .iter()
                .map(|b| {
                    let with = |tail: &[TokenId]| [b.as_slice(), tail].concat();
                    match method {
                        Method::Direct => o.lp(&with(&[x]), &[v]),
                        Method::DirectPP => o.lp(&with(&[x]), &[v]) - o.lp(&with(&[null]), &[v]),
                        Method::Channel => o.lp(&with(&[v]), &[x]),
                    }
                })
                .sum()
        })
        .collect()
}

#[test]
fn all_nine_cells_match_bigram_table() {
    let o = Oracle::new();
    let params = bigram_lm(&o.table, 2, 2, 32).unwrap();
    let view = LmView::base(&params);
    let verb = Verbalizer::new("v", vec!["great".into(), "bad".into()]).unwrap();
    let fs = fewshot(&["pos", "neg"], &[("x1", 0), ("x2", 1)]);
    let demos = [(o.vocab.id("x1").unwrap(), 0), (o.vocab.id("x2").unwrap(), 1)];
    let verbs = [o.vocab.id("great").unwrap(), o.vocab.id("bad").unwrap()];
    for input in ["q", "x1", "x2"] {
        let x = o.vocab.id(input).unwrap();
        for method in Method::ALL {
            for mode in Mode::ALL {
                let spec = ScoringSpec::new(method, mode);
                let expected = hand_scores(&o, method, mode, &demos, x, &verbs);
                let fast = Scorer::new(view, &o.vocab, &spec, Some(&fs), &verb).unwrap().score(input).unwrap();
                let slow = score_reference(&view, &o.vocab, &spec, Some(&fs), &verb, input).unwrap();
                for c in 0..2 {
                    assert!((fast.scores[c] - expected[c]).abs() < 1e-9, "{method} {mode} {input}: {:?} vs {expected:?}", fast.scores);
                    assert!((slow.scores[c] - expected[c]).abs() < 1e-9, "{method} {mode} {input} reference");
                }
            }
        }
    }
}

#[test]
fn channel_zero_shot_reads_table_entries() {
    let o = Oracle::new();
    let params = bigram_lm(&o.table, 1, 2, 16).unwrap();
    let verb = Verbalizer::new("v", vec!["great".into(), "bad".into()]).unwrap();
    let s = Scorer::new(LmView::base(&params), &o.vocab, &ScoringSpec::new(Method::Channel, Mode::ZeroShot), None, &verb)
        .unwrap()
        .score("x2")
        .unwrap();
    assert!((s.scores[0] - 0.1f64.ln()).abs() < 1e-9);
    assert!((s.scores[1] - 0.3f64.ln()).abs() < 1e-9);
    assert_eq!(s.chosen, 1);
}

#[test]
fn golden_contexts() {
    let vocab = Vocab::from_corpus(&["A three-hour cinema master class It was great terrible one two"]).unwrap();
    let verb = Verbalizer::new("v", vec!["It was great".into(), "It was terrible".into()]).unwrap();
    let x = "A three-hour cinema master class";
    let direct = build_context(&vocab, &ScoringSpec::new(Method::Direct, Mode::ZeroShot), None, &verb, x, 0).unwrap();
    assert_eq!(direct.len(), 1);
    assert_eq!(vocab.detokenize(&direct[0].prefix), x);
    assert_eq!(vocab.detokenize(&direct[0].continuation), "It was great");

    let channel = build_context(&vocab, &ScoringSpec::new(Method::Channel, Mode::ZeroShot), None, &verb, x, 0).unwrap();
    assert_eq!(vocab.detokenize(&channel[0].prefix), "It was great");
    assert_eq!(vocab.detokenize(&channel[0].continuation), x);

    let fs = fewshot(&["pos", "neg"], &[("one", 1), ("two", 0)]);
    let concat = build_context(&vocab, &ScoringSpec::new(Method::Channel, Mode::Concat), Some(&fs), &verb, x, 0).unwrap();
    assert_eq!(
        vocab.detokenize(&concat[0].prefix),
        "It was terrible one\nIt was great two\nIt was great"
    );
    let nl = vocab.newline().unwrap();
    let mut expected = ids(&vocab, "It was terrible one");
    expected.push(nl);
    expected.extend(ids(&vocab, "It was great two"));
    expected.push(nl);
    expected.extend(ids(&vocab, "It was great"));
    assert_eq!(concat[0].prefix.0, expected);
    assert_eq!(concat[0].continuation.0, ids(&vocab, x));

    let ens = build_context(&vocab, &ScoringSpec::new(Method::Direct, Mode::Ensemble), Some(&fs), &verb, x, 1).unwrap();
    assert_eq!(ens.len(), 2);
    assert_eq!(vocab.detokenize(&ens[0].prefix), format!("one It was terrible\n{x}"));
    assert_eq!(vocab.detokenize(&ens[1].continuation), "It was terrible");
}

#[test]
fn uniform_lm_scores_depend_only_on_length() {
    let vocab = Vocab::from_corpus(&["a b c d e great so bad"]).unwrap();
    let params = uniform_lm(&vocab, 2, 2, 16, 32).unwrap();
    let verb = Verbalizer::new("v", vec!["great".into(), "so bad".into()]).unwrap();
    let n = vocab.content_count() as f64;
    let mut spec = ScoringSpec::new(Method::Direct, Mode::ZeroShot);
    spec.length_normalize = false;
    let raw = Scorer::new(LmView::base(&params), &vocab, &spec, None, &verb).unwrap().score("a b c").unwrap();
    assert!((raw.scores[0] + n.ln()).abs() < 1e-9);
    assert!((raw.scores[1] + 2.0 * n.ln()).abs() < 1e-9);
    spec.length_normalize = true;
    let norm = Scorer::new(LmView::base(&params), &vocab, &spec, None, &verb).unwrap().score("a b c").unwrap();
    assert_eq!(norm.scores[0], norm.scores[1]);
    assert_eq!(norm.chosen, 0);
}

fn toy() -> (Vocab, chanlab::lm::LmParams) {
    let vocab = Vocab::from_corpus(&["the film was great and fun . it was bad and dull N/A a piece one"]).unwrap();
    let mut config = LmConfig::new(vocab.len());
    config.model_dim = 16;
    config.max_seq_len = 96;
    config.seed = 11;
    let params = random_lm(&config, 0.3).unwrap();
    (vocab, params)
}

#[test]
fn direct_pp_with_null_as_input_scores_zero() {
    let (vocab, params) = toy();
    let verb = Verbalizer::from_template("v", "it was {} .", &["great", "bad"]).unwrap();
    let fs = fewshot(&["pos", "neg"], &[("the film was fun", 0), ("dull film", 1)]);
    for mode in Mode::ALL {
        let s = Scorer::new(LmView::base(&params), &vocab, &ScoringSpec::new(Method::DirectPP, mode), Some(&fs), &verb)
            .unwrap()
            .score("N/A")
            .unwrap();
        assert!(s.scores.iter().all(|&v| v.abs() < 1e-12), "{mode}: {:?}", s.scores);
        assert_eq!(s.chosen, 0);
    }
}

#[test]
fn cached_scorer_matches_reference_everywhere() {
    let (vocab, params) = toy();
    let mut prompts = ndarray::Array2::zeros((3, params.config.model_dim));
    prompts.row_mut(1).assign(&params.embedding.row(7));
    prompts[[2, 3]] = 0.4;
    let views = [
        LmView::base(&params),
        LmView {
            prompts: Some(&prompts),
            ..LmView::base(&params)
        },
    ];
    let verb = Verbalizer::from_template("v", "a {} piece", &["great", "bad"]).unwrap();
    let fs = fewshot(&["pos", "neg"], &[("the film was fun", 0), ("dull and bad", 1), ("it was great", 0)]);
    let inputs = ["the film was dull", "fun", "it was a piece of film and"];
    for view in views {
        for method in Method::ALL {
            for mode in Mode::ALL {
                let spec = ScoringSpec::new(method, mode);
                let scorer = Scorer::new(view, &vocab, &spec, Some(&fs), &verb).unwrap();
                let batch = scorer.score_batch(&inputs).unwrap();
                for (input, got) in inputs.iter().zip(&batch) {
                    let want = score_reference(&view, &vocab, &spec, Some(&fs), &verb, input).unwrap();
                    for c in 0..2 {
                        assert!((got.scores[c] - want.scores[c]).abs() < 1e-9, "{method} {mode}");
                    }
                    assert_eq!(got.chosen, want.chosen);
                }
            }
        }
    }
}

#[test]
fn ensemble_is_sum_of_single_demo_scores_and_order_free() {
    let (vocab, params) = toy();
    let view = LmView::base(&params);
    let verb = Verbalizer::from_template("v", "it was {} .", &["great", "bad"]).unwrap();
    let fs = fewshot(&["pos", "neg"], &[("the film was fun", 0), ("dull and bad", 1), ("a great piece", 0), ("bad film", 1)]);
    let input = "the film was dull and fun";
    for method in Method::ALL {
        let spec = ScoringSpec::new(method, Mode::Ensemble);
        let ens = Scorer::new(view, &vocab, &spec, Some(&fs), &verb).unwrap().score(input).unwrap();
        let mut sum = vec![0.0; 2];
        for e in &fs.examples {
            let one = fewshot(&["pos", "neg"], &[(&e.text, e.label)]);
            let s = Scorer::new(view, &vocab, &ScoringSpec::new(method, Mode::Concat), Some(&one), &verb)
                .unwrap()
                .score(input)
                .unwrap();
            sum.iter_mut().zip(&s.scores).for_each(|(a, b)| *a += b);
        }
        for c in 0..2 {
            assert!((ens.scores[c] - sum[c]).abs() < 1e-9);
        }
        for perm in permutations(4) {
            let p = Scorer::new(view, &vocab, &spec, Some(&fs.permuted(&perm)), &verb).unwrap().score(input).unwrap();
            assert_eq!(p.scores, ens.scores);
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn overlong_context_names_k() {
    let (vocab, params) = toy();
    let verb = Verbalizer::from_template("v", "it was {} .", &["great", "bad"]).unwrap();
    let long: Vec<(String, usize)> = (0..12).map(|i| ("the film was great and fun".to_string(), i % 2)).collect();
    let pairs: Vec<(&str, usize)> = long.iter().map(|(t, l)| (t.as_str(), *l)).collect();
    let fs = fewshot(&["pos", "neg"], &pairs);
    let err = Scorer::new(LmView::base(&params), &vocab, &ScoringSpec::new(Method::Channel, Mode::Concat), Some(&fs), &verb)
        .and_then(|s| s.score("fun"))
        .err()
        .unwrap();
    match err {
        Error::Length { k, max, len } => {
            assert_eq!(k, Some(12));
            assert!(len > max);
            assert!(err_text(k, len, max).contains("K=12"));
        }
        other => panic!("unexpected {other}"),
    }
}

fn err_text(k: Option<usize>, len: usize, max: usize) -> String {
    Error::Length { len, max, k }.to_string()
}

#[test]
fn repeated_verbalizer_keeps_per_token_average() {
    let vocab = Vocab::from_corpus(&["x a"]).unwrap();
    let (x, a) = (vocab.id("x").unwrap(), vocab.id("a").unwrap());
    let mut table = BigramTable::uniform(vocab.len());
    table.set_row(x, &[(a, 0.4)]).unwrap();
    table.set_row(a, &[(a, 0.4)]).unwrap();
    let params = bigram_lm(&table, 1, 2, 16).unwrap();
    let verb = Verbalizer::new("v", vec!["a".into(), "a a".into()]).unwrap();
    let s = Scorer::new(LmView::base(&params), &vocab, &ScoringSpec::new(Method::Direct, Mode::ZeroShot), None, &verb)
        .unwrap()
        .score("x")
        .unwrap();
    assert!((s.scores[0] - 0.4f64.ln()).abs() < 1e-9);
    assert!((s.scores[1] - 0.4f64.ln()).abs() < 1e-9);
}

#[test]
fn direct_and_channel_agree_on_symmetric_joint_table() {
    let vocab = Vocab::from_corpus(&["x0 x1 x2 v0 v1 v2"]).unwrap();
    let xs: Vec<TokenId> = (0..3).map(|i| vocab.id(&format!("x{i}")).unwrap()).collect();
    let vs: Vec<TokenId> = (0..3).map(|i| vocab.id(&format!("v{i}")).unwrap()).collect();
    // doubly stochastic up to scale: uniform marginals on both sides
    let joint = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]];
    let mut table = BigramTable::uniform(vocab.len());
    for i in 0..3 {
        table.set_row(xs[i], &(0..3).map(|j| (vs[j], 0.9 * joint[i][j])).collect::<Vec<_>>()).unwrap();
    }
    for j in 0..3 {
        table.set_row(vs[j], &(0..3).map(|i| (xs[i], 0.9 * joint[i][j])).collect::<Vec<_>>()).unwrap();
    }
    let params = bigram_lm(&table, 1, 2, 16).unwrap();
    let verb = Verbalizer::new("v", vec!["v0".into(), "v1".into(), "v2".into()]).unwrap();
    let score = |m: Method, x: &str| -> ClassScores {
        Scorer::new(LmView::base(&params), &vocab, &ScoringSpec::new(m, Mode::ZeroShot), None, &verb)
            .unwrap()
            .score(x)
            .unwrap()
    };
    for (i, x) in ["x0", "x1", "x2"].iter().enumerate() {
        assert_eq!(score(Method::Direct, x).chosen, i);
        assert_eq!(score(Method::Channel, x).chosen, i);
    }
}

#[test]
fn demonstration_modes_require_fewshot() {
    let (vocab, params) = toy();
    let verb = Verbalizer::from_template("v", "it was {} .", &["great", "bad"]).unwrap();
    assert!(Scorer::new(LmView::base(&params), &vocab, &ScoringSpec::new(Method::Direct, Mode::Concat), None, &verb).is_err());
    let _ = TokenSeq::new();
}
