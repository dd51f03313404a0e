//! The nine scoring cells: {direct, direct++, channel} × {zero-shot,
//! concat, ensemble}, with optional length normalization.
//!
//! Demonstration pairs are joined by the newline token. A direct pair is
//! `xʲ v(cʲ)`, a channel pair `v(cʲ) xʲ`.

mod verbalizer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use verbalizer::{Verbalizer, VerbalizerEntry, VerbalizerFile};

use crate::datagen::FewShotSet;
use crate::error::{Error, Result};
use crate::lm::{conditional_logprob, LmView, PrefixCache, TokenSeq, Vocab, NULL_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "direct++")]
    DirectPP,
    #[serde(rename = "channel")]
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "ensemble")]
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Direct, Method::DirectPP, Method::Channel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::DirectPP => "direct++",
            Method::Channel => "channel",
        }
    }
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::ZeroShot, Mode::Concat, Mode::Ensemble];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero-shot",
            Mode::Concat => "concat",
            Mode::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scoring method {s:?}")))
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scoring mode {s:?}")))
    }
}

fn default_true() -> bool {
    true
}

fn default_null() -> String {
    NULL_MARKER.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoringSpec {
    pub method: Method,
    pub mode: Mode,
    #[serde(default = "default_true")]
    pub length_normalize: bool,
    /// Content-free input used by direct++.
    #[serde(default = "default_null")]
    pub null_input: String,
}

impl ScoringSpec {
    pub fn new(method: Method, mode: Mode) -> Self {
        Self {
            method,
            mode,
            length_normalize: true,
            null_input: default_null(),
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.method, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub chosen: usize,
}

impl ClassScores {
    pub fn new(scores: Vec<f64>) -> Self {
        let chosen = argmax(&scores);
        Self { scores, chosen }
    }
}

/// Index of the largest score, lowest index on ties; NaN never wins.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

pub fn predict(scores: &ClassScores) -> usize {
    argmax(&scores.scores)
}

/// One (prefix, continuation) pair whose conditional log-probability enters
/// a class score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub prefix: TokenSeq,
    pub continuation: TokenSeq,
}

fn demo_pair(vocab: &Vocab, method: Method, verbalizer: &Verbalizer, text: &str, label: usize) -> Result<TokenSeq> {
    let x = vocab.tokenize(text)?;
    let v = vocab.tokenize(verbalizer.surface(label))?;
    Ok(match method {
        Method::Channel => TokenSeq::concat(&[&v, &x]),
        _ => TokenSeq::concat(&[&x, &v]),
    })
}

fn newline(vocab: &Vocab) -> Result<TokenSeq> {
    vocab
        .newline()
        .map(|t| TokenSeq(vec![t]))
        .ok_or_else(|| Error::Config("vocabulary has no newline token for demonstrations".into()))
}

/// Demonstration blocks that precede the query: one block holding all K
/// pairs for concat, one per pair for ensemble, a single empty block for
/// zero-shot. Each non-empty block ends with a newline.
fn demo_blocks(
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
) -> Result<Vec<TokenSeq>> {
    if spec.mode == Mode::ZeroShot {
        return Ok(vec![TokenSeq::new()]);
    }
    let fs = fewshot
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::Config(format!("{} scoring needs a non-empty few-shot set", spec.mode)))?;
    let nl = newline(vocab)?;
    let pairs = fs
        .examples
        .iter()
        .map(|e| demo_pair(vocab, spec.method, verbalizer, &e.text, e.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(match spec.mode {
        Mode::Concat => {
            let mut block = TokenSeq::new();
            for p in &pairs {
                block.extend_from(p);
                block.extend_from(&nl);
            }
            vec![block]
        }
        _ => pairs.iter().map(|p| TokenSeq::concat(&[p, &nl])).collect(),
    })
}

fn query(method: Method, block: &TokenSeq, x: &TokenSeq, v: &TokenSeq) -> Context {
    match method {
        Method::Channel => Context {
            prefix: TokenSeq::concat(&[block, v]),
            continuation: x.clone(),
        },
        _ => Context {
            prefix: TokenSeq::concat(&[block, x]),
            continuation: v.clone(),
        },
    }
}

/// Contexts scored for `candidate`: one for zero-shot and concat, K for
/// ensemble, in few-shot order.
pub fn build_context(
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
    input: &str,
    candidate: usize,
) -> Result<Vec<Context>> {
    if candidate >= verbalizer.num_labels() {
        return Err(Error::Config(format!("candidate {candidate} outside the label set")));
    }
    let x = vocab.tokenize(input)?;
    let v = vocab.tokenize(verbalizer.surface(candidate))?;
    Ok(demo_blocks(vocab, spec, fewshot, verbalizer)?
        .iter()
        .map(|b| query(spec.method, b, &x, &v))
        .collect())
}

fn shots(spec: &ScoringSpec, fewshot: Option<&FewShotSet>) -> Option<usize> {
    match spec.mode {
        Mode::ZeroShot => None,
        _ => fewshot.map(|f| f.len()),
    }
}

fn name_k(k: Option<usize>) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Length { len, max, .. } => Error::Length { len, max, k },
        other => other,
    }
}

fn check_context(view: &LmView, ctx: &Context, k: Option<usize>) -> Result<()> {
    let len = 1 + view.n_prompts() + ctx.prefix.len() + ctx.continuation.len();
    let max = view.params.config.max_seq_len;
    if len > max {
        return Err(Error::Length { len, max, k });
    }
    Ok(())
}

fn normalized(raw: f64, tokens: usize, on: bool) -> f64 {
    if on && tokens > 0 {
        raw / tokens as f64
    } else {
        raw
    }
}

/// Straightforward scorer: every context is evaluated from scratch. Used as
/// the reference for [`Scorer`] and for traces.
pub fn score_reference(
    view: &LmView,
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
    input: &str,
) -> Result<ClassScores> {
    Ok(ClassScores::new(reference_scores(view, vocab, spec, fewshot, verbalizer, input)?))
}

fn reference_scores(
    view: &LmView,
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
    input: &str,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; verbalizer.num_labels()];
    for t in trace(view, vocab, spec, fewshot, verbalizer, input)? {
        scores[t.label] += t.score;
    }
    Ok(scores)
}

/// One scored context, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub label: usize,
    pub context: String,
    pub continuation: String,
    pub raw: f64,
    pub normalized: f64,
    /// Normalized null-input term subtracted by direct++.
    pub null_term: Option<f64>,
    /// Contribution to the class score.
    pub score: f64,
}

pub fn trace(
    view: &LmView,
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
    input: &str,
) -> Result<Vec<ScoreTrace>> {
    verbalizer.validate()?;
    let k = shots(spec, fewshot);
    let bos = vocab.bos();
    let mut out = Vec::new();
    for label in 0..verbalizer.num_labels() {
        let ctxs = build_context(vocab, spec, fewshot, verbalizer, input, label)?;
        let nulls = match spec.method {
            Method::DirectPP => Some(build_context(vocab, spec, fewshot, verbalizer, &spec.null_input, label)?),
            _ => None,
        };
        for (j, ctx) in ctxs.iter().enumerate() {
            check_context(view, ctx, k)?;
            let raw = conditional_logprob(view, bos, &ctx.prefix, &ctx.continuation).map_err(name_k(k))?;
            let norm = normalized(raw, ctx.continuation.len(), spec.length_normalize);
            let null_term = match &nulls {
                Some(n) => {
                    check_context(view, &n[j], k)?;
                    let r = conditional_logprob(view, bos, &n[j].prefix, &n[j].continuation).map_err(name_k(k))?;
                    Some(normalized(r, n[j].continuation.len(), spec.length_normalize))
                }
                None => None,
            };
            out.push(ScoreTrace {
                label,
                context: vocab.detokenize(&ctx.prefix),
                continuation: vocab.detokenize(&ctx.continuation),
                raw,
                normalized: norm,
                null_term,
                score: norm - null_term.unwrap_or(0.0),
            });
        }
    }
    // ensemble terms are summed in a canonical order
    if spec.mode == Mode::Ensemble {
        out.sort_by(|a, b| (a.label, &a.context).cmp(&(b.label, &b.context)));
    }
    Ok(out)
}

/// Scores many inputs under one (spec, few-shot set, verbalizer) cell.
/// Demonstration prefixes are run once and cached; each input then costs
/// only its own tokens.
pub struct Scorer<'a> {
    vocab: &'a Vocab,
    spec: ScoringSpec,
    k: Option<usize>,
    verbs: Vec<TokenSeq>,
    /// One cached block per ensemble term (sorted canonically), else one.
    stems: Vec<PrefixCache<'a>>,
    /// Channel: `stem ∥ v(c)` per stem and class.
    class_stems: Vec<Vec<PrefixCache<'a>>>,
    /// Direct++: normalized null-input term per stem and class.
    null_terms: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        view: LmView<'a>,
        vocab: &'a Vocab,
        spec: &ScoringSpec,
        fewshot: Option<&FewShotSet>,
        verbalizer: &Verbalizer,
    ) -> Result<Self> {
        verbalizer.validate()?;
        if let Some(fs) = fewshot.filter(|_| spec.mode != Mode::ZeroShot) {
            if fs.labels.len() != verbalizer.num_labels() {
                return Err(Error::Config(format!(
                    "few-shot set has {} labels but the verbalizer maps {}",
                    fs.labels.len(),
                    verbalizer.num_labels()
                )));
            }
        }
        let k = shots(spec, fewshot);
        let bos = vocab.bos();
        let verbs = (0..verbalizer.num_labels())
            .map(|c| vocab.tokenize(verbalizer.surface(c)))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = demo_blocks(vocab, spec, fewshot, verbalizer)?;
        if spec.mode == Mode::Ensemble {
            blocks.sort_by(|a, b| a.ids().cmp(b.ids()));
        }
        let stems = blocks
            .iter()
            .map(|b| PrefixCache::new(view, bos, b).map_err(name_k(k)))
            .collect::<Result<Vec<_>>>()?;
        let mut class_stems = Vec::new();
        let mut null_terms = Vec::new();
        match spec.method {
            Method::Channel => {
                for s in &stems {
                    class_stems.push(
                        verbs
                            .iter()
                            .map(|v| s.extend(v).map_err(name_k(k)))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
            }
            Method::DirectPP => {
                // same packed path as the input term, so x = NULL cancels exactly
                let null = vocab.tokenize(&spec.null_input)?;
                let joined: Vec<TokenSeq> = verbs.iter().map(|v| TokenSeq::concat(&[&null, v])).collect();
                let refs: Vec<&TokenSeq> = joined.iter().collect();
                for s in &stems {
                    let toks = s.token_logprobs(&refs).map_err(name_k(k))?;
                    null_terms.push(
                        toks.iter()
                            .zip(&verbs)
                            .map(|(t, v)| normalized(t[t.len() - v.len()..].iter().sum(), v.len(), spec.length_normalize))
                            .collect(),
                    );
                }
            }
            Method::Direct => {}
        }
        Ok(Self {
            vocab,
            spec: spec.clone(),
            k,
            verbs,
            stems,
            class_stems,
            null_terms,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.verbs.len()
    }

    pub fn score(&self, input: &str) -> Result<ClassScores> {
        Ok(self.score_batch(&[input])?.remove(0))
    }

    pub fn score_batch<S: AsRef<str>>(&self, inputs: &[S]) -> Result<Vec<ClassScores>> {
        let xs = inputs
            .iter()
            .map(|t| self.vocab.tokenize(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let n_labels = self.num_labels();
        let mut scores = vec![vec![0.0; n_labels]; xs.len()];
        let norm = self.spec.length_normalize;
        match self.spec.method {
            Method::Channel => {
                let refs: Vec<&TokenSeq> = xs.iter().collect();
                for per_class in &self.class_stems {
                    for (c, cache) in per_class.iter().enumerate() {
                        let lp = cache.logprobs(&refs).map_err(name_k(self.k))?;
                        for (i, (r, x)) in lp.iter().zip(&xs).enumerate() {
                            scores[i][c] += normalized(*r, x.len(), norm);
                        }
                    }
                }
            }
            Method::Direct | Method::DirectPP => {
                let joined: Vec<TokenSeq> = xs
                    .iter()
                    .flat_map(|x| self.verbs.iter().map(move |v| TokenSeq::concat(&[x, v])))
                    .collect();
                let refs: Vec<&TokenSeq> = joined.iter().collect();
                for (s, stem) in self.stems.iter().enumerate() {
                    let toks = stem.token_logprobs(&refs).map_err(name_k(self.k))?;
                    for (j, t) in toks.iter().enumerate() {
                        let (i, c) = (j / n_labels, j % n_labels);
                        let vlen = self.verbs[c].len();
                        let raw: f64 = t[t.len() - vlen..].iter().sum();
                        let mut term = normalized(raw, vlen, norm);
                        if let Some(nt) = self.null_terms.get(s) {
                            term -= nt[c];
                        }
                        scores[i][c] += term;
                    }
                }
            }
        }
        Ok(scores.into_iter().map(ClassScores::new).collect())
    }
}

/// Convenience wrapper scoring a single input.
pub fn score(
    view: LmView,
    vocab: &Vocab,
    spec: &ScoringSpec,
    fewshot: Option<&FewShotSet>,
    verbalizer: &Verbalizer,
    input: &str,
) -> Result<ClassScores> {
    Scorer::new(view, vocab, spec, fewshot, verbalizer)?.score(input)
}
