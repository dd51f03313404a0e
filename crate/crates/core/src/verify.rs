//! Invariant suites run by `chanlab verify` and the acceptance target:
//! gradient checks, frozen-parameter hashes, score algebra, the bigram-table
//! oracle and zero-effect deltas. Each runs on small seeded models.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{Example, FewShotSet, SamplingSpec};
use crate::error::Result;
use crate::lm::gradcheck::{check_gradients, OwnedView};
use crate::lm::handbuilt::{bigram_lm, random_lm, BigramTable};
use crate::lm::{
    conditional_logprob, GradientSubset, LmConfig, LmParams, LmView, TokenId, TokenSeq, TrainPair, Vocab,
};
use crate::scoring::{Method, Mode, Scorer, ScoringSpec, Verbalizer};
use crate::tuning::{init_tuning, train, training_pairs, Delta, PromptState, TrainConfig, TunedModel, TuningMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
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

fn toy(model_dim: usize, seed: u64, std: f64) -> (Vocab, LmParams) {
    let vocab = Vocab::from_corpus(&[
        "the film was great and fun . it was terrible and dull a piece one story plot good bad movie",
    ])
    .expect("fixed corpus");
    let config = LmConfig {
        layers: 2,
        heads: 2,
        model_dim,
        max_seq_len: 128,
        vocab_size: vocab.len(),
        seed,
    };
    (vocab, random_lm(&config, std).expect("valid config"))
}

fn sentiment_verbalizer() -> Verbalizer {
    Verbalizer::from_template("v", "it was {} .", &["great", "terrible"]).expect("two labels")
}

fn toy_pairs(vocab: &Vocab) -> Vec<TrainPair> {
    [("the film was", "great and fun"), ("it was", "dull"), ("", "a piece of bad plot")]
        .iter()
        .map(|(c, t)| TrainPair {
            context: vocab.tokenize(c).expect("unk-safe"),
            target: vocab.tokenize(t).expect("unk-safe"),
        })
        .collect()
}

/// Central differences against the reverse pass for each gradient subset.
pub fn gradient_checks(coords: usize) -> Vec<Check> {
    let (vocab, params) = toy(16, 3, 0.3);
    let h = params.config.model_dim;
    let pairs = toy_pairs(&vocab);
    let mut untied = OwnedView::new(params.clone());
    untied.params.untie();
    let mut head = untied.clone();
    head.head = Some(untied.params.head().clone() + 0.05);
    let mut transform = untied.clone();
    transform.transform =
        Some(Array2::eye(h) + Array2::from_shape_fn((h, h), |(i, j)| 0.05 * ((i * h + j) as f64).cos()));
    let mut prompts = OwnedView::new(params.clone());
    prompts.prompts = Some(Array2::from_shape_fn((4, h), |(i, j)| 0.4 * ((i + 3 * j) as f64).sin()));
    let all = OwnedView::new(params);
    [
        (head, GradientSubset::HeadOnly),
        (transform, GradientSubset::TransformOnly),
        (prompts, GradientSubset::PromptEmbeddingsOnly),
        (all, GradientSubset::AllParams),
    ]
    .into_iter()
    .map(|(model, subset)| {
        timed(&format!("gradient {subset:?}"), || {
            let r = check_gradients(&model, vocab.bos(), &pairs, subset, coords, 17)?;
            Ok((
                r.passed(),
                format!("{} coords, max rel err {:.2e}, {} over {:.0e}", r.checked, r.max_rel_err, r.failures, r.tolerance),
            ))
        })
    })
    .collect()
}

/// Trains every tuning method for `steps` steps and compares the hashes of
/// the base tensors before and after. Also checks the delta moved.
pub fn frozen_hashes(steps: usize) -> Check {
    timed("frozen parameters", || {
        let (vocab, base) = toy(16, 5, 0.2);
        let before = base.tensor_hashes();
        let fs = fewshot(&["pos", "neg"], &[("the film was fun", 0), ("dull plot", 1), ("a good story", 0)]);
        let config = TrainConfig {
            steps,
            n_prompts: 4,
            ..TrainConfig::default()
        };
        let mut notes = Vec::new();
        let mut ok = true;
        for method in TuningMethod::ALL {
            let pairs = training_pairs(&vocab, &fs, &sentiment_verbalizer(), method.direction())?;
            let init = init_tuning(method, &base, &vocab, &config)?;
            let start = init.delta.clone();
            let lr = if method == TuningMethod::FullFinetune { 1e-3 } else { 0.01 };
            let out = train(init, vocab.bos(), &pairs, &config, lr)?;
            let moved = out.model.delta != start;
            let same = base.tensor_hashes() == before;
            ok &= moved && same;
            notes.push(format!("{method}: moved={moved} frozen={same}"));
        }
        Ok((ok, notes.join("; ")))
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Ensemble additivity and permutation invariance on a K=4 set.
pub fn ensemble_algebra() -> Check {
    timed("ensemble algebra", || {
        let (vocab, params) = toy(16, 11, 0.3);
        let view = LmView::base(&params);
        let verb = sentiment_verbalizer();
        let labels = ["pos", "neg"];
        let demos = [("the film was fun", 0), ("dull and bad", 1), ("a great piece", 0), ("bad film", 1)];
        let fs = fewshot(&labels, &demos);
        let input = "the film was dull and fun";
        let mut worst = 0.0f64;
        let mut stable = true;
        for method in Method::ALL {
            let spec = ScoringSpec::new(method, Mode::Ensemble);
            let ens = Scorer::new(view, &vocab, &spec, Some(&fs), &verb)?.score(input)?;
            let mut sum = vec![0.0; 2];
            for d in &demos {
                let one = fewshot(&labels, &[*d]);
                let s = Scorer::new(view, &vocab, &ScoringSpec::new(method, Mode::Concat), Some(&one), &verb)?
                    .score(input)?;
                sum.iter_mut().zip(&s.scores).for_each(|(a, b)| *a += b);
            }
            worst = worst.max(max_diff(&ens.scores, &sum));
            for perm in permutations(4) {
                let p = Scorer::new(view, &vocab, &spec, Some(&fs.permuted(&perm)), &verb)?.score(input)?;
                stable &= p.chosen == ens.chosen && p.scores == ens.scores;
            }
        }
        Ok((
            worst < 1e-9 && stable,
            format!("max |ensemble - sum| {worst:.2e}; 24 permutations identical: {stable}"),
        ))
    })
}

/// Witness that concatenation is order-sensitive while ensembling is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipWitness {
    pub method: Method,
    pub lm_seed: u64,
    pub input: String,
    pub concat_choices: Vec<usize>,
    pub ensemble_stable: bool,
}

/// Searches seeded random LMs for an input whose concat prediction changes
/// across the 24 orders of a fixed K=4 set, then checks ensemble on it.
pub fn find_concat_flip(max_seeds: u64) -> Result<Option<FlipWitness>> {
    let labels = ["pos", "neg"];
    let fs = fewshot(
        &labels,
        &[("the film was fun", 0), ("dull and bad", 1), ("a great piece", 0), ("bad plot", 1)],
    );
    let verb = sentiment_verbalizer();
    let inputs = ["the film was dull and fun", "a piece of story", "good movie", "the plot was bad and great"];
    let perms = permutations(4);
    for seed in 0..max_seeds {
        let (vocab, params) = toy(16, 100 + seed, 0.5);
        let view = LmView::base(&params);
        for method in Method::ALL {
            for input in inputs {
                let mut choices = Vec::with_capacity(perms.len());
                for perm in &perms {
                    let s = Scorer::new(view, &vocab, &ScoringSpec::new(method, Mode::Concat), Some(&fs.permuted(perm)), &verb)?
                        .score(input)?;
                    choices.push(s.chosen);
                }
                if choices.iter().all(|&c| c == choices[0]) {
                    continue;
                }
                let spec = ScoringSpec::new(method, Mode::Ensemble);
                let first = Scorer::new(view, &vocab, &spec, Some(&fs), &verb)?.score(input)?;
                let mut stable = true;
                for perm in &perms {
                    let s = Scorer::new(view, &vocab, &spec, Some(&fs.permuted(perm)), &verb)?.score(input)?;
                    stable &= s.chosen == first.chosen;
                }
                return Ok(Some(FlipWitness {
                    method,
                    lm_seed: 100 + seed,
                    input: input.to_string(),
                    concat_choices: choices,
                    ensemble_stable: stable,
                }));
            }
        }
    }
    Ok(None)
}

pub fn concat_flip() -> Check {
    timed("concat order flip", || {
        Ok(match find_concat_flip(20)? {
            Some(w) => {
                let zeros = w.concat_choices.iter().filter(|&&c| c == 0).count();
                (
                    w.ensemble_stable,
                    format!(
                        "{} lm seed {} input {:?}: concat picks label 0 in {zeros}/24 orders; ensemble stable: {}",
                        w.method, w.lm_seed, w.input, w.ensemble_stable
                    ),
                )
            }
            None => (false, "no order-sensitive concat prediction found".into()),
        })
    })
}

/// Hand-specified bigram table over single-token words.
struct Oracle {
    vocab: Vocab,
    table: BigramTable,
}

impl Oracle {
    fn new() -> Result<Self> {
        let vocab = Vocab::from_corpus(&["x1 x2 q great bad"])?;
        let id = |w: &str| vocab.id(w).expect("corpus word");
        let (x1, x2, q, great, bad) = (id("x1"), id("x2"), id("q"), id("great"), id("bad"));
        let nl = vocab.newline().expect("reserved");
        let null = vocab.null_marker();
        let mut table = BigramTable::uniform(vocab.len());
        table.set_row(vocab.bos(), &[(x1, 0.2), (q, 0.1), (great, 0.3), (bad, 0.15)])?;
        table.set_row(x1, &[(great, 0.5), (bad, 0.2)])?;
        table.set_row(x2, &[(great, 0.1), (bad, 0.6)])?;
        table.set_row(q, &[(great, 0.35), (bad, 0.4)])?;
        table.set_row(great, &[(nl, 0.3), (x1, 0.25), (q, 0.05), (x2, 0.1)])?;
        table.set_row(bad, &[(nl, 0.3), (x2, 0.3), (q, 0.2), (x1, 0.05)])?;
        table.set_row(nl, &[(x1, 0.2), (x2, 0.2), (great, 0.25), (bad, 0.15), (q, 0.1)])?;
        table.set_row(null, &[(great, 0.45), (bad, 0.2)])?;
        Ok(Self { vocab, table })
    }

    /// log P(cont | prefix) read off the table: only the token before each
    /// continuation token matters.
    fn lp(&self, prefix: &[TokenId], cont: &[TokenId]) -> f64 {
        let mut prev = *prefix.last().unwrap_or(&self.vocab.bos());
        let mut total = 0.0;
        for &y in cont {
            total += self.table.prob(prev, y).ln();
            prev = y;
        }
        total
    }

    fn hand(&self, method: Method, mode: Mode, demos: &[(TokenId, usize)], x: TokenId, verbs: &[TokenId]) -> Vec<f64> {
        let nl = self.vocab.newline().expect("reserved");
        let null = self.vocab.null_marker();
        let block = |&(dx, dl): &(TokenId, usize)| match method {
            Method::Channel => vec![verbs[dl], dx, nl],
            _ => vec![dx, verbs[dl], nl],
        };
        let blocks: Vec<Vec<TokenId>> = match mode {
            Mode::ZeroShot => vec![vec![]],
            Mode::Concat => vec![demos.iter().flat_map(block).collect()],
            Mode::Ensemble => demos.iter().map(block).collect(),
        };
        verbs
            .iter()
            .map(|&v| {
                blocks
                    .iter()
                    .map(|b| {
                        let with = |t: TokenId| [b.as_slice(), &[t]].concat();
                        match method {
                            Method::Direct => self.lp(&with(x), &[v]),
                            Method::DirectPP => self.lp(&with(x), &[v]) - self.lp(&with(null), &[v]),
                            Method::Channel => self.lp(&with(v), &[x]),
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// All nine method × mode cells against hand computation on a bigram LM.
pub fn oracle_cells() -> Check {
    timed("nine-cell oracle", || {
        let o = Oracle::new()?;
        let params = bigram_lm(&o.table, 2, 2, 32)?;
        let view = LmView::base(&params);
        let verb = Verbalizer::new("v", vec!["great".into(), "bad".into()])?;
        let fs = fewshot(&["pos", "neg"], &[("x1", 0), ("x2", 1)]);
        let id = |w: &str| o.vocab.id(w).expect("oracle word");
        let demos = [(id("x1"), 0), (id("x2"), 1)];
        let verbs = [id("great"), id("bad")];
        let mut worst = 0.0f64;
        for input in ["q", "x1", "x2"] {
            for method in Method::ALL {
                for mode in Mode::ALL {
                    let want = o.hand(method, mode, &demos, id(input), &verbs);
                    let got = Scorer::new(view, &o.vocab, &ScoringSpec::new(method, mode), Some(&fs), &verb)?.score(input)?;
                    worst = worst.max(max_diff(&got.scores, &want));
                }
            }
        }
        Ok((worst < 1e-9, format!("27 cell/input pairs, max abs diff {worst:.2e}")))
    })
}

/// Identity transform, fresh untied head and prompts copied from real
/// token embeddings leave scores unchanged.
pub fn zero_effect_deltas() -> Check {
    timed("zero-effect deltas", || {
        let (vocab, base) = toy(16, 5, 0.2);
        let verb = sentiment_verbalizer();
        let config = TrainConfig {
            n_prompts: 4,
            ..TrainConfig::default()
        };
        let inputs = ["the movie was fun", "dull plot", "a good story and a bad film"];
        let zero = Scorer::new(LmView::base(&base), &vocab, &ScoringSpec::new(Method::Direct, Mode::ZeroShot), None, &verb)?;
        let mut worst = 0.0f64;
        for method in [TuningMethod::TransformationTuning, TuningMethod::HeadTuning] {
            let model = init_tuning(method, &base, &vocab, &config)?;
            let tuned = model.scorer(&vocab, &verb)?;
            for x in inputs {
                worst = worst.max(max_diff(&zero.score(x)?.scores, &tuned.score(x)?.scores));
            }
        }
        let ids = vocab.tokenize("the movie was")?;
        let model = TunedModel {
            base: &base,
            method: TuningMethod::DirectPromptTuning,
            delta: Delta::Prompts(PromptState::from_tokens(&base, ids.ids())),
        };
        let prompted = model.scorer(&vocab, &verb)?;
        for x in inputs {
            let textual = zero.score(&format!("the movie was {x}"))?;
            worst = worst.max(max_diff(&prompted.score(x)?.scores, &textual.scores));
        }
        let view = model.view();
        for label in ["it was great .", "it was terrible ."] {
            let v = vocab.tokenize(label)?;
            for x in inputs {
                let x = vocab.tokenize(x)?;
                let a = conditional_logprob(&view, vocab.bos(), &v, &x)?;
                let b = conditional_logprob(&LmView::base(&base), vocab.bos(), &TokenSeq::concat(&[&ids, &v]), &x)?;
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst < 1e-6, format!("max abs diff {worst:.2e}")))
    })
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut out = gradient_checks(100);
    out.push(frozen_hashes(100));
    out.push(ensemble_algebra());
    out.push(concat_flip());
    out.push(oracle_cells());
    out.push(zero_effect_deltas());
    out
}
