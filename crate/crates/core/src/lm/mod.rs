//! Toy decoder-only causal LM: vocabulary, weights, exact log-probabilities,
//! subset-restricted gradients and pretraining.

mod config;
mod grad;
pub mod gradcheck;
pub mod handbuilt;
mod logprob;
mod model;
mod params;
mod pretrain;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::LmConfig;
pub use grad::{batch_loss, compute_gradients, GradientSubset, Gradients, HeadFeatures, LossAndGrad, TrainPair};
pub use logprob::{conditional_logprob, next_token_logprobs, PrefixCache};
pub use model::{log_sum_exp, Item, LmView};
pub use params::{hash_f64s, LayerParams, LmParams, INIT_STD, LAYER_TENSOR_NAMES};
pub use pretrain::{pretrain, tokenize_corpus, PretrainOptions, Pretrained};
pub use vocab::{
    build_vocab, split_words, TokenId, TokenSeq, Vocab, BOS, DEFAULT_RESERVED, NEWLINE, NULL_MARKER,
    PAD, UNK,
};

use crate::checkpoint;
use crate::error::{Error, Result};

/// A pretrained LM together with the vocabulary it was trained over.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub vocab: Vocab,
    pub params: LmParams,
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    tied: bool,
    vocab_tokens: Vec<String>,
    vocab_frequency: Vec<u64>,
}

impl LanguageModel {
    pub fn view(&self) -> LmView<'_> {
        LmView::base(&self.params)
    }

    pub fn bos(&self) -> TokenId {
        self.vocab.bos()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = LmMeta {
            config: self.params.config.clone(),
            tied: self.params.is_tied(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_frequency: self.vocab.frequencies().to_vec(),
        };
        checkpoint::write(path, "lm", serde_json::to_value(meta)?, &self.params.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path)?;
        if header.kind != "lm" {
            return Err(Error::Checkpoint(format!("expected an lm checkpoint, found {}", header.kind)));
        }
        let meta: LmMeta = serde_json::from_value(header.meta)?;
        let vocab = Vocab::from_parts(meta.vocab_tokens, meta.vocab_frequency)?;
        let mut params = LmParams::init(&meta.config)?;
        if !meta.tied {
            params.untie();
        }
        let expected: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        let found: Vec<(String, usize)> = header.tensors.iter().map(|e| (e.name.clone(), e.len)).collect();
        if expected != found {
            return Err(Error::Checkpoint("tensor layout does not match config".into()));
        }
        for (slot, data) in params.tensors_mut().into_iter().zip(tensors) {
            slot.copy_from_slice(&data);
        }
        Ok(Self { vocab, params })
    }
}
