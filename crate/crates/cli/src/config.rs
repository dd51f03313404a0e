use std::path::{Path, PathBuf};

use chanlab::datagen::{ShotCount, TaskKind};
use chanlab::harness::{BenchConfig, ExperimentGrid, MethodSpec};
use chanlab::scoring::{Method, Mode, ScoringSpec, Verbalizer};
use chanlab::tuning::{TrainConfig, TuningMethod};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Grid coordinates shared by every method a command runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub k: ShotCount,
    pub data_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    /// Verbalizer names; empty means all four.
    pub verbalizers: Vec<String>,
    pub p_minus: Option<f64>,
    pub upsample: bool,
    pub test_limit: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            k: ShotCount::K(16),
            data_seeds: (0..5).collect(),
            train_seeds: (0..4).collect(),
            verbalizers: Vec::new(),
            p_minus: None,
            upsample: false,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Task whose test split transfer runs evaluate on. Must also be listed
    /// in `bench.extra_corpora`.
    pub transfer_target: Option<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bench: BenchConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    /// Empty means the command's default method list.
    pub methods: Vec<MethodSpec>,
    pub ablation: AblationConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: BenchConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            methods: Vec::new(),
            ablation: AblationConfig::default(),
            out: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Validation(format!("invalid config {}: {e}", path.display())))
}

pub fn all_scoring() -> Vec<MethodSpec> {
    let mut out = Vec::new();
    for method in Method::ALL {
        for mode in Mode::ALL {
            out.push(MethodSpec::Scoring(ScoringSpec::new(method, mode)));
        }
    }
    out
}

pub fn all_tuning() -> Vec<MethodSpec> {
    TuningMethod::ALL.iter().map(|&m| MethodSpec::tuning(m)).collect()
}

impl ExperimentConfig {
    /// Field-level checks beyond what parsing catches.
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |field: &str, msg: &str| Err(Failure::Validation(format!("{field}: {msg}")));
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if let ShotCount::K(0) = self.grid.k {
            return bad("grid.k", "must be positive");
        }
        if let Some(p) = self.grid.p_minus {
            if !(0.0..=1.0).contains(&p) {
                return bad("grid.p_minus", "must lie in [0, 1]");
            }
        }
        if self.bench.pool_size == 0 || self.bench.test_size == 0 {
            return bad("bench", "pool_size and test_size must be positive");
        }
        if self.bench.pretrain.batch_size == 0 {
            return bad("bench.pretrain.batch_size", "must be positive");
        }
        if let Some(t) = self.ablation.transfer_target {
            if !self.bench.extra_corpora.contains(&t) {
                return bad(
                    "ablation.transfer_target",
                    "must also appear in bench.extra_corpora so the LM vocabulary covers it",
                );
            }
        }
        self.bench
            .lm_config(1)
            .validate()
            .map_err(|e| Failure::Validation(format!("bench.lm: {e}")))?;
        self.train
            .validate()
            .map_err(|e| Failure::Validation(format!("train: {e}")))
    }

    /// Verbalizers named in the grid, or all of them.
    pub fn pick_verbalizers(&self, all: &[Verbalizer]) -> Result<Vec<Verbalizer>, Failure> {
        if self.grid.verbalizers.is_empty() {
            return Ok(all.to_vec());
        }
        self.grid
            .verbalizers
            .iter()
            .map(|name| {
                all.iter().find(|v| &v.name == name).cloned().ok_or_else(|| {
                    let names: Vec<&str> = all.iter().map(|v| v.name.as_str()).collect();
                    Failure::Validation(format!("grid.verbalizers: unknown {name:?}, expected one of {names:?}"))
                })
            })
            .collect()
    }

    pub fn grid(&self, method: MethodSpec, verbalizers: Vec<Verbalizer>) -> ExperimentGrid {
        ExperimentGrid {
            task: self.bench.task.to_string(),
            method,
            verbalizers,
            data_seeds: self.grid.data_seeds.clone(),
            train_seeds: self.grid.train_seeds.clone(),
            k: self.grid.k,
            p_minus: self.grid.p_minus,
            upsample: self.grid.upsample,
            exclusion: None,
            train: self.train.clone(),
            test_limit: self.grid.test_limit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_methods_and_grid() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            workers = 2
            methods = [
                { kind = "scoring", method = "channel", mode = "concat" },
                { kind = "tuning", method = "channel-prompt" },
            ]
            [grid]
            k = "full"
            verbalizers = ["v1"]
            [bench]
            task = "4-way-topic-analog"
            [bench.pretrain]
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.grid.k, ShotCount::Full);
        assert_eq!(cfg.methods[1], MethodSpec::tuning(TuningMethod::ChannelPromptTuning));
        assert_eq!(cfg.bench.pretrain.steps, 10);
        assert_eq!(cfg.bench.lm.max_seq_len, 384);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[grid]\nkk = 3").is_err());
        let cfg: ExperimentConfig = toml::from_str("workers = 0").unwrap();
        assert!(matches!(cfg.validate(), Err(Failure::Validation(m)) if m.starts_with("workers")));
    }
}
