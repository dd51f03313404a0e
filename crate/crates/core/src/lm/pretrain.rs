//! Next-token pretraining of the toy LM on a plain-text corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::LmConfig;
use super::grad::{compute_gradients, GradientSubset, TrainPair};
use super::model::LmView;
use super::params::LmParams;
use super::vocab::{split_words, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub steps: usize,
    /// Documents per step.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_frac: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            warmup: 50,
            min_lr_frac: 0.1,
        }
    }
}

impl PretrainOptions {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_frac;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: LmParams,
    /// Mean per-token NLL of each step's batch, before the update.
    pub losses: Vec<f64>,
}

/// Splits documents into token windows that fit behind BOS.
pub fn tokenize_corpus<S: AsRef<str>>(vocab: &Vocab, corpus: &[S], max_seq_len: usize) -> Result<Vec<TokenSeq>> {
    let window = max_seq_len - 1;
    let mut docs = Vec::new();
    for doc in corpus {
        let text = doc.as_ref();
        if let Some(w) = split_words(text).into_iter().find(|w| vocab.id(w).is_none()) {
            return Err(Error::Config(format!(
                "corpus word {w:?} missing from vocabulary; build the vocabulary from the same corpus"
            )));
        }
        let ids = vocab.tokenize(text)?;
        for chunk in ids.ids().chunks(window) {
            docs.push(TokenSeq(chunk.to_vec()));
        }
    }
    docs.retain(|d| !d.is_empty());
    if docs.is_empty() {
        return Err(Error::Config("corpus has no tokens".into()));
    }
    Ok(docs)
}

/// Trains all weights with a tied head. `steps == 0` returns the seeded
/// initialization unchanged.
pub fn pretrain<S: AsRef<str>>(
    config: &LmConfig,
    vocab: &Vocab,
    corpus: &[S],
    opts: &PretrainOptions,
) -> Result<Pretrained> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "config vocab_size {} != vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut params = LmParams::init(config)?;
    let docs = tokenize_corpus(vocab, corpus, config.max_seq_len)?;
    if opts.steps == 0 {
        return Ok(Pretrained {
            params,
            losses: Vec::new(),
        });
    }
    let bos = vocab.bos();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7072_6574_7261_696e);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(AdamConfig::default(), &sizes);
    let batch_size = opts.batch_size.clamp(1, docs.len());
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(TrainPair {
                context: TokenSeq::new(),
                target: docs[order[cursor]].clone(),
            });
            cursor += 1;
        }
        let out = compute_gradients(&LmView::base(&params), bos, &batch, GradientSubset::AllParams)
            .map_err(|e| match e {
                Error::Numerical(_) => Error::Diverged {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
        losses.push(out.loss);
        let g = out.grads.params.expect("full gradient");
        let grads: Vec<&[f64]> = g.tensors().into_iter().map(|(_, t)| t).collect();
        let mut slots = params.tensors_mut();
        adam.step(&mut slots, &grads, opts.lr_at(step));
        log::debug!("pretrain step {step} loss {:.4}", out.loss);
    }
    Ok(Pretrained { params, losses })
}
