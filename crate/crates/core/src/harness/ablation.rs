//! Ablation suites: varying K, class imbalance, unseen labels, and
//! cross-task transfer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, blank_result, Exclusion, ExperimentGrid, MethodSpec, RunResult, Workbench};
use crate::datagen::{sample_fewshot, Dataset, ShotCount};
use crate::error::{Error, Result};
use crate::scoring::{Mode, Verbalizer};
use crate::tuning::{select_lr, training_pairs, TuningMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    VaryK,
    Imbalance,
    UnseenLabel,
    Transfer,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vary_k" | "vary-k" => Ok(AblationKind::VaryK),
            "imbalance" => Ok(AblationKind::Imbalance),
            "unseen_label" | "unseen-label" => Ok(AblationKind::UnseenLabel),
            "transfer" => Ok(AblationKind::Transfer),
            _ => Err(Error::Config(format!("unknown ablation {s:?}"))),
        }
    }
}

pub const VARY_K: [ShotCount; 4] = [ShotCount::K(4), ShotCount::K(16), ShotCount::K(64), ShotCount::Full];
pub const IMBALANCE_P_MINUS: [f64; 5] = [0.0, 0.125, 0.25, 0.375, 0.5];

/// One grid per K. Demonstration methods skip `Full`, which cannot fit in
/// a context.
pub fn vary_k_grids(base: &ExperimentGrid) -> Vec<ExperimentGrid> {
    VARY_K
        .iter()
        .filter(|&&k| !(k == ShotCount::Full && matches!(&base.method, MethodSpec::Scoring(s) if s.mode != Mode::ZeroShot)))
        .map(|&k| ExperimentGrid { k, ..base.clone() })
        .collect()
}

/// p⁻ × upsample: ten grids per method.
pub fn imbalance_grids(base: &ExperimentGrid) -> Vec<ExperimentGrid> {
    let mut out = Vec::new();
    for &p in &IMBALANCE_P_MINUS {
        for upsample in [false, true] {
            out.push(ExperimentGrid {
                p_minus: Some(p),
                upsample,
                ..base.clone()
            });
        }
    }
    out
}

pub fn unseen_label_grid(base: &ExperimentGrid) -> ExperimentGrid {
    ExperimentGrid {
        exclusion: Some(Exclusion::RandomPerSeed),
        ..base.clone()
    }
}

/// One `(x, series, value)` triple of curve data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub ablation: String,
    pub x: String,
    pub series: String,
    pub value: f64,
}

impl AblationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationKind::VaryK => "vary_k",
            AblationKind::Imbalance => "imbalance",
            AblationKind::UnseenLabel => "unseen_label",
            AblationKind::Transfer => "transfer",
        }
    }

    /// Average accuracy per (x, series) over completed runs.
    pub fn curve(&self, results: &[RunResult]) -> Vec<CurvePoint> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in results.iter().filter(|r| r.ok()) {
            let (x, series) = match self {
                AblationKind::VaryK => (r.k.to_string(), r.method.label()),
                AblationKind::Imbalance => (
                    format!("{}", r.p_minus.unwrap_or(f64::NAN)),
                    if r.upsample {
                        format!("{} +upsample", r.method.label())
                    } else {
                        r.method.label()
                    },
                ),
                AblationKind::UnseenLabel | AblationKind::Transfer => (r.task.clone(), r.method.label()),
            };
            groups.entry((x, series)).or_default().push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|((x, series), v)| CurvePoint {
                ablation: self.as_str().into(),
                x,
                series,
                value: v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub source: String,
    pub target: String,
    pub runs: Vec<RunResult>,
}

/// Tunes on the source pool with the source verbalizer and evaluates on the
/// target test split with the target verbalizer of the same index. Head
/// tuning is rejected when the label spaces differ in size.
pub fn transfer(
    source: &Workbench,
    grid: &ExperimentGrid,
    target_name: &str,
    target_test: &Dataset,
    target_verbalizers: &[Verbalizer],
    workers: usize,
) -> Result<TransferResult> {
    grid.validate()?;
    let method = match grid.method {
        MethodSpec::Tuning { method } => method,
        _ => return Err(Error::Config("transfer evaluates tuned models only".into())),
    };
    if target_verbalizers.len() != grid.verbalizers.len() {
        return Err(Error::Config("source and target need the same number of verbalizers".into()));
    }
    if method == TuningMethod::HeadTuning && source.train_pool.num_labels() != target_test.num_labels() {
        return Err(Error::NotApplicable(
            "head tuning cannot transfer when the label space is not shared".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let runs = pool.install(|| {
        grid.cells()
            .par_iter()
            .map(|&cell| {
                let mut r = blank_result(grid, cell);
                r.task = format!("{}->{target_name}", grid.task);
                match transfer_cell(source, grid, method, cell, target_test, &target_verbalizers[cell.verbalizer]) {
                    Ok((preds, lr)) => {
                        r.accuracy = accuracy(&preds, target_test);
                        r.predictions = preds;
                        r.selected_lr = Some(lr);
                    }
                    Err(e) => r.error = Some(e.to_string()),
                }
                r
            })
            .collect::<Vec<_>>()
    });
    Ok(TransferResult {
        source: grid.task.clone(),
        target: target_name.to_string(),
        runs,
    })
}

fn transfer_cell(
    source: &Workbench,
    grid: &ExperimentGrid,
    method: TuningMethod,
    cell: super::Cell,
    target_test: &Dataset,
    target_verbalizer: &Verbalizer,
) -> Result<(Vec<usize>, f64)> {
    let vocab = &source.lm.vocab;
    let spec = grid.sampling_spec(cell.data_seed.unwrap_or(0), source.train_pool.num_labels());
    let fewshot = sample_fewshot(&source.train_pool, &spec)?;
    let mut config = grid.train.clone();
    config.seed = cell.train_seed.unwrap_or(0);
    let pairs = training_pairs(vocab, &fewshot, &grid.verbalizers[cell.verbalizer], method.direction())?;
    let sel = select_lr(method, &source.lm.params, vocab, &pairs, &config)?;
    let outcome = sel.outcome.ok_or(Error::Diverged {
        step: 0,
        loss: f64::INFINITY,
    })?;
    let scorer = outcome.model.scorer(vocab, target_verbalizer)?;
    let texts: Vec<&str> = target_test.examples.iter().map(|e| e.text.as_str()).collect();
    let preds = scorer.score_batch(&texts)?.into_iter().map(|s| s.chosen).collect();
    Ok((preds, sel.chosen))
}
