//! Parameter-restricted tuning on a few-shot set: head, transformation,
//! direct and channel prompt tuning, and full finetuning.
//!
//! A [`TunedModel`] borrows the frozen base parameters and owns exactly one
//! delta. Scoring goes through the same zero-shot path as the base LM.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::FewShotSet;
use crate::error::{Error, Result};
use crate::lm::{
    compute_gradients, GradientSubset, HeadFeatures, LmParams, LmView, TokenId, TrainPair, Vocab,
};
use crate::optim::{Adam, AdamConfig};
use crate::scoring::{Method, Mode, Scorer, ScoringSpec, Verbalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Direct,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TuningMethod {
    #[serde(rename = "head")]
    HeadTuning,
    #[serde(rename = "transformation")]
    TransformationTuning,
    #[serde(rename = "direct-prompt")]
    DirectPromptTuning,
    #[serde(rename = "channel-prompt")]
    ChannelPromptTuning,
    #[serde(rename = "full-finetune")]
    FullFinetune,
}

impl TuningMethod {
    pub const ALL: [TuningMethod; 5] = [
        TuningMethod::HeadTuning,
        TuningMethod::TransformationTuning,
        TuningMethod::DirectPromptTuning,
        TuningMethod::ChannelPromptTuning,
        TuningMethod::FullFinetune,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TuningMethod::HeadTuning => "head",
            TuningMethod::TransformationTuning => "transformation",
            TuningMethod::DirectPromptTuning => "direct-prompt",
            TuningMethod::ChannelPromptTuning => "channel-prompt",
            TuningMethod::FullFinetune => "full-finetune",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            TuningMethod::ChannelPromptTuning => Direction::Channel,
            _ => Direction::Direct,
        }
    }

    pub fn subset(&self) -> GradientSubset {
        match self {
            TuningMethod::HeadTuning => GradientSubset::HeadOnly,
            TuningMethod::TransformationTuning => GradientSubset::TransformOnly,
            TuningMethod::DirectPromptTuning | TuningMethod::ChannelPromptTuning => {
                GradientSubset::PromptEmbeddingsOnly
            }
            TuningMethod::FullFinetune => GradientSubset::AllParams,
        }
    }

    /// The scoring method a tuned model is evaluated with.
    pub fn scoring_method(&self) -> Method {
        match self.direction() {
            Direction::Direct => Method::Direct,
            Direction::Channel => Method::Channel,
        }
    }
}

impl std::fmt::Display for TuningMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TuningMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TuningMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tuning method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub full_finetune_lr: f64,
    pub n_prompts: usize,
    /// Prompt rows are seeded from this many most frequent content tokens
    /// (capped by the vocabulary).
    pub prompt_top: usize,
    /// Final steps averaged when comparing learning rates.
    pub select_window: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 32,
            lr_grid: vec![0.1, 0.01, 0.001],
            full_finetune_lr: 1e-5,
            n_prompts: 20,
            prompt_top: 5000,
            select_window: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.lr_grid.is_empty() {
            return Err(Error::Config("train.lr_grid must not be empty".into()));
        }
        if self.lr_grid.iter().chain([&self.full_finetune_lr]).any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Learning rates searched for `method`.
    pub fn grid_for(&self, method: TuningMethod) -> Vec<f64> {
        match method {
            TuningMethod::FullFinetune => vec![self.full_finetune_lr],
            _ => self.lr_grid.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub embeddings: Array2<f64>,
    /// Tokens whose embeddings seeded each row.
    pub init_token_ids: Vec<TokenId>,
}

impl PromptState {
    /// Rows copied from the embeddings of `ids`.
    pub fn from_tokens(params: &LmParams, ids: &[TokenId]) -> Self {
        let h = params.config.model_dim;
        let mut embeddings = Array2::zeros((ids.len(), h));
        for (r, &t) in ids.iter().enumerate() {
            embeddings.row_mut(r).assign(&params.embedding.row(t as usize));
        }
        Self {
            embeddings,
            init_token_ids: ids.to_vec(),
        }
    }

    /// `n` distinct tokens drawn from the `top` most frequent content tokens.
    pub fn sample(params: &LmParams, vocab: &Vocab, n: usize, top: usize, seed: u64) -> Result<Self> {
        let pool = vocab.top_content(top.min(vocab.content_count()));
        if n == 0 || n > pool.len() {
            return Err(Error::Config(format!(
                "cannot seed {n} prompt rows from a top slice of {} tokens",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9017_7e11_0000_0003);
        let ids: Vec<TokenId> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        Ok(Self::from_tokens(params, &ids))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delta {
    Head(Array2<f64>),
    Transform(Array2<f64>),
    Prompts(PromptState),
    Full(LmParams),
}

#[derive(Debug, Clone)]
pub struct TunedModel<'a> {
    pub base: &'a LmParams,
    pub method: TuningMethod,
    pub delta: Delta,
}

impl<'a> TunedModel<'a> {
    pub fn view(&self) -> LmView<'_> {
        let base = LmView::base(self.base);
        match &self.delta {
            Delta::Head(o) => LmView { head: Some(o), ..base },
            Delta::Transform(u) => LmView {
                transform: Some(u),
                ..base
            },
            Delta::Prompts(p) => LmView {
                prompts: Some(&p.embeddings),
                ..base
            },
            Delta::Full(params) => LmView::base(params),
        }
    }

    fn delta_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.delta {
            Delta::Head(m) | Delta::Transform(m) => vec![m.as_slice_mut().unwrap()],
            Delta::Prompts(p) => vec![p.embeddings.as_slice_mut().unwrap()],
            Delta::Full(params) => params.tensors_mut(),
        }
    }

    /// Named delta tensors, in checkpoint order.
    pub fn delta_tensors(&self) -> Vec<(String, &[f64])> {
        match &self.delta {
            Delta::Head(m) => vec![("head".into(), m.as_slice().unwrap())],
            Delta::Transform(m) => vec![("transform".into(), m.as_slice().unwrap())],
            Delta::Prompts(p) => vec![("prompts".into(), p.embeddings.as_slice().unwrap())],
            Delta::Full(params) => params.tensors(),
        }
    }

    /// Zero-shot scorer in the method's direction.
    pub fn scorer<'s>(&'s self, vocab: &'s Vocab, verbalizer: &Verbalizer) -> Result<Scorer<'s>> {
        let spec = ScoringSpec::new(self.method.scoring_method(), Mode::ZeroShot);
        Scorer::new(self.view(), vocab, &spec, None, verbalizer)
    }
}

/// Fresh delta for `method`: untied head copy, identity transform, sampled
/// prompt rows, or a copy of all parameters.
pub fn init_tuning<'a>(
    method: TuningMethod,
    base: &'a LmParams,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TunedModel<'a>> {
    config.validate()?;
    let h = base.config.model_dim;
    let delta = match method {
        TuningMethod::HeadTuning => Delta::Head(base.head().clone()),
        TuningMethod::TransformationTuning => Delta::Transform(Array2::eye(h)),
        TuningMethod::DirectPromptTuning | TuningMethod::ChannelPromptTuning => Delta::Prompts(PromptState::sample(
            base,
            vocab,
            config.n_prompts,
            config.prompt_top,
            config.seed,
        )?),
        TuningMethod::FullFinetune => Delta::Full(base.clone()),
    };
    Ok(TunedModel { base, method, delta })
}

/// Training pairs in the method's direction: `x → v(c)` or `v(c) → x`.
pub fn training_pairs(
    vocab: &Vocab,
    fewshot: &FewShotSet,
    verbalizer: &Verbalizer,
    direction: Direction,
) -> Result<Vec<TrainPair>> {
    if fewshot.is_empty() {
        return Err(Error::Config("cannot train on an empty few-shot set".into()));
    }
    fewshot
        .examples
        .iter()
        .map(|e| {
            if e.label >= verbalizer.num_labels() {
                return Err(Error::Config(format!("label {} has no verbalizer entry", e.label)));
            }
            let x = vocab.tokenize(&e.text)?;
            let v = vocab.tokenize(verbalizer.surface(e.label))?;
            Ok(match direction {
                Direction::Direct => TrainPair { context: x, target: v },
                Direction::Channel => TrainPair { context: v, target: x },
            })
        })
        .collect()
}

/// Index stream that walks the training set in a fresh shuffled order every
/// epoch.
struct EpochCycler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochCycler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<'a> {
    pub model: TunedModel<'a>,
    /// Loss before each update, one entry per step.
    pub losses: Vec<f64>,
}

/// Runs `config.steps` Adam updates on the method's delta. Only the delta
/// changes; the base is borrowed immutably throughout.
pub fn train<'a>(
    mut model: TunedModel<'a>,
    bos: TokenId,
    pairs: &[TrainPair],
    config: &TrainConfig,
    lr: f64,
) -> Result<TrainOutcome<'a>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("cannot train on an empty few-shot set".into()));
    }
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    let subset = model.method.subset();
    let batch = config.batch_size.min(pairs.len());
    let mut cycler = EpochCycler::new(pairs.len(), config.seed);
    let features = match subset {
        GradientSubset::HeadOnly | GradientSubset::TransformOnly => Some(HeadFeatures::compute(&model.view(), bos, pairs)?),
        _ => None,
    };
    let sizes: Vec<usize> = model.delta_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(config.adam, &sizes);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = cycler.batch(batch);
        let lg = match &features {
            Some(f) => f.gradients(&model.view(), &idx, subset),
            None => {
                let b: Vec<TrainPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
                compute_gradients(&model.view(), bos, &b, subset)
            }
        };
        let lg = match lg {
            Ok(lg) => lg,
            Err(Error::Numerical(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !lg.loss.is_finite() {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
        losses.push(lg.loss);
        let grads = lg.grads.tensors();
        adam.step(&mut model.delta_tensors_mut(), &grads, lr);
        if model.delta_tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
    }
    Ok(TrainOutcome { model, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    /// Mean loss over the final steps; `None` when the run diverged.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LrSelection<'a> {
    pub chosen: f64,
    pub trials: Vec<LrTrial>,
    pub all_diverged: bool,
    /// The run at the chosen rate (retrained when every rate diverged).
    pub outcome: Option<TrainOutcome<'a>>,
}

/// Mean of the last `window` entries.
pub fn tail_mean(losses: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, losses.len().max(1));
    let tail = &losses[losses.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Index of the trial with the lowest final loss, ties toward the smaller
/// rate; `None` when every trial diverged.
pub fn pick_lr(trials: &[LrTrial]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        let Some(loss) = t.final_loss else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bl = trials[b].final_loss.unwrap();
                if loss < bl || (loss == bl && t.lr < trials[b].lr) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Trains one run per grid rate and keeps the one with the lowest mean loss
/// over the final `select_window` steps. No held-out data is used.
pub fn select_lr<'a>(
    method: TuningMethod,
    base: &'a LmParams,
    vocab: &Vocab,
    pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<LrSelection<'a>> {
    let mut trials = Vec::new();
    let mut best: Option<(usize, TrainOutcome<'a>)> = None;
    for (i, &lr) in config.grid_for(method).iter().enumerate() {
        let model = init_tuning(method, base, vocab, config)?;
        match train(model, vocab.bos(), pairs, config, lr) {
            Ok(out) => {
                let loss = tail_mean(&out.losses, config.select_window);
                let loss = loss.is_finite().then_some(loss);
                trials.push(LrTrial { lr, final_loss: loss });
                if pick_lr(&trials) == Some(i) {
                    best = Some((i, out));
                }
            }
            Err(Error::Diverged { step, loss }) => {
                log::warn!("{method} lr {lr} diverged at step {step} (loss {loss})");
                trials.push(LrTrial { lr, final_loss: None });
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((i, out)) => Ok(LrSelection {
            chosen: trials[i].lr,
            trials,
            all_diverged: false,
            outcome: Some(out),
        }),
        None => {
            let chosen = trials.iter().map(|t| t.lr).fold(f64::INFINITY, f64::min);
            log::warn!("{method}: every learning rate diverged, falling back to {chosen}");
            Ok(LrSelection {
                chosen,
                trials,
                all_diverged: true,
                outcome: None,
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DeltaMeta {
    method: TuningMethod,
    base_hash: String,
    prompt_token_ids: Option<Vec<TokenId>>,
    shape: (usize, usize),
    extra: serde_json::Value,
}

/// Hash identifying the base a delta was trained against.
pub fn base_fingerprint(base: &LmParams) -> String {
    let mut h = Sha256::new();
    for (name, digest) in base.tensor_hashes() {
        h.update(name.as_bytes());
        h.update(digest.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the delta as a `delta:<method>` checkpoint.
pub fn save_delta(model: &TunedModel, path: &Path, extra: serde_json::Value) -> Result<()> {
    let (shape, ids) = match &model.delta {
        Delta::Head(m) | Delta::Transform(m) => (m.dim(), None),
        Delta::Prompts(p) => (p.embeddings.dim(), Some(p.init_token_ids.clone())),
        Delta::Full(_) => ((0, 0), None),
    };
    let meta = DeltaMeta {
        method: model.method,
        base_hash: base_fingerprint(model.base),
        prompt_token_ids: ids,
        shape,
        extra,
    };
    checkpoint::write(
        path,
        &format!("delta:{}", model.method),
        serde_json::to_value(meta)?,
        &model.delta_tensors(),
    )
}

pub fn load_delta<'a>(path: &Path, base: &'a LmParams) -> Result<TunedModel<'a>> {
    let (header, mut tensors) = checkpoint::read(path)?;
    let meta: DeltaMeta = serde_json::from_value(header.meta)?;
    if header.kind != format!("delta:{}", meta.method) {
        return Err(Error::Checkpoint(format!("unexpected checkpoint kind {}", header.kind)));
    }
    if meta.base_hash != base_fingerprint(base) {
        return Err(Error::Checkpoint("delta was trained against a different base LM".into()));
    }
    let matrix = |data: Vec<f64>| {
        Array2::from_shape_vec(meta.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    };
    let delta = match meta.method {
        TuningMethod::HeadTuning => Delta::Head(matrix(tensors.remove(0))?),
        TuningMethod::TransformationTuning => Delta::Transform(matrix(tensors.remove(0))?),
        TuningMethod::DirectPromptTuning | TuningMethod::ChannelPromptTuning => Delta::Prompts(PromptState {
            embeddings: matrix(tensors.remove(0))?,
            init_token_ids: meta.prompt_token_ids.unwrap_or_default(),
        }),
        TuningMethod::FullFinetune => {
            let mut params = base.clone();
            let slots = params.tensors_mut();
            if slots.len() != tensors.len() || slots.iter().zip(&tensors).any(|(s, t)| s.len() != t.len()) {
                return Err(Error::Checkpoint("full-finetune delta does not match the base layout".into()));
            }
            for (slot, t) in slots.into_iter().zip(tensors) {
                slot.copy_from_slice(&t);
            }
            Delta::Full(params)
        }
    };
    Ok(TunedModel {
        base,
        method: meta.method,
        delta,
    })
}

/// `step,loss` rows, steps counted from 0.
pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.17e}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
