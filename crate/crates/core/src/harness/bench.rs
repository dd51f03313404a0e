//! Building a workbench: generate a task, build the vocabulary from its
//! corpus and pretrain the LM on it.

use serde::{Deserialize, Serialize};

use super::Workbench;
use crate::datagen::{SyntheticTask, TaskKind, TaskSpec, TextLength};
use crate::error::Result;
use crate::lm::{build_vocab, pretrain, LanguageModel, LmConfig, PretrainOptions, DEFAULT_RESERVED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub task: TaskKind,
    pub length: TextLength,
    pub pool_size: usize,
    pub test_size: usize,
    pub corpus_docs: usize,
    pub task_seed: u64,
    /// Tasks whose corpora join the pretraining corpus, so their test
    /// splits share the vocabulary. Transfer targets go here.
    pub extra_corpora: Vec<TaskKind>,
    /// `vocab_size` is overwritten with the size of the built vocabulary.
    pub lm: LmConfig,
    pub pretrain: PretrainOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut lm = LmConfig::new(0);
        lm.max_seq_len = 384;
        Self {
            task: TaskKind::BinarySentiment,
            length: TextLength::Short,
            pool_size: 10_000,
            test_size: 1000,
            corpus_docs: 3000,
            task_seed: 0,
            extra_corpora: Vec::new(),
            lm,
            pretrain: PretrainOptions::default(),
        }
    }
}

impl BenchConfig {
    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        let mut spec = TaskSpec::new(kind);
        spec.length = self.length;
        spec.test_size = self.test_size;
        spec.corpus_docs = self.corpus_docs;
        spec
    }

    pub fn generate(&self) -> Result<SyntheticTask> {
        self.generate_kind(self.task)
    }

    /// Same sizes and seed as the main task, for another kind.
    pub fn generate_kind(&self, kind: TaskKind) -> Result<SyntheticTask> {
        self.task_spec(kind).generate(self.pool_size, self.task_seed)
    }

    /// Pretraining corpus: the main task's, then each extra task's.
    pub fn corpus(&self, task: &SyntheticTask) -> Result<Vec<String>> {
        let mut corpus = task.corpus.clone();
        for &kind in &self.extra_corpora {
            corpus.extend(self.generate_kind(kind)?.corpus);
        }
        Ok(corpus)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            ..self.lm.clone()
        }
    }
}

/// Workbench plus the pretraining loss curve.
pub struct Built {
    pub bench: Workbench,
    pub task: SyntheticTask,
    pub pretrain_losses: Vec<f64>,
}

pub fn build_workbench(config: &BenchConfig) -> Result<Built> {
    let task = config.generate()?;
    let corpus = config.corpus(&task)?;
    let vocab = build_vocab(&corpus, &DEFAULT_RESERVED)?;
    let lm_config = config.lm_config(vocab.len());
    lm_config.validate()?;
    let trained = pretrain(&lm_config, &vocab, &corpus, &config.pretrain)?;
    Ok(Built {
        bench: Workbench {
            lm: LanguageModel {
                vocab,
                params: trained.params,
            },
            train_pool: task.train.clone(),
            test: task.test.clone(),
        },
        task,
        pretrain_losses: trained.losses,
    })
}
