//! Experiment grids over verbalizers and seeds, aggregation, ablations and
//! reports.

mod ablation;
mod bench;
mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{
    imbalance_grids, transfer, unseen_label_grid, vary_k_grids, AblationKind, CurvePoint, TransferResult,
    IMBALANCE_P_MINUS, VARY_K,
};
pub use bench::{build_workbench, BenchConfig, Built};
pub use report::{code_version, config_hash, load_results, render_table, write_report, Report, ResultRecord};

use crate::datagen::{random_excluded_label, sample_fewshot, Dataset, FewShotSet, SamplingSpec, ShotCount};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::scoring::{Mode, Scorer, ScoringSpec, Verbalizer};
use crate::tuning::{select_lr, training_pairs, TrainConfig, TuningMethod};

/// What a grid evaluates: a scoring cell or a tuning method.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Scoring(ScoringSpec),
    Tuning { method: TuningMethod },
}

impl MethodSpec {
    pub fn tuning(method: TuningMethod) -> Self {
        MethodSpec::Tuning { method }
    }

    pub fn label(&self) -> String {
        match self {
            MethodSpec::Scoring(s) => s.label(),
            MethodSpec::Tuning { method } => format!("{method} tuning"),
        }
    }

    pub fn mode(&self) -> String {
        match self {
            MethodSpec::Scoring(s) => s.mode.to_string(),
            MethodSpec::Tuning { .. } => "tuned".into(),
        }
    }

    fn uses_data(&self) -> bool {
        !matches!(self, MethodSpec::Scoring(s) if s.mode == Mode::ZeroShot)
    }

    fn uses_train_seed(&self) -> bool {
        matches!(self, MethodSpec::Tuning { .. })
    }
}

/// How the unseen-label ablation picks its excluded label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    Fixed(usize),
    /// Drawn per data seed.
    RandomPerSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub task: String,
    pub method: MethodSpec,
    pub verbalizers: Vec<Verbalizer>,
    pub data_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    pub k: ShotCount,
    pub p_minus: Option<f64>,
    pub upsample: bool,
    pub exclusion: Option<Exclusion>,
    pub train: TrainConfig,
    /// Evaluate on the first `n` test examples only.
    pub test_limit: Option<usize>,
}

/// Coordinates of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub verbalizer: usize,
    pub data_seed: Option<u64>,
    pub train_seed: Option<u64>,
}

impl ExperimentGrid {
    /// Grid with the standard seeds: data seeds 0..5 and train seeds 0..4.
    pub fn standard(task: &str, method: MethodSpec, verbalizers: Vec<Verbalizer>, k: usize, train: TrainConfig) -> Self {
        Self {
            task: task.to_string(),
            method,
            verbalizers,
            data_seeds: (0..5).collect(),
            train_seeds: (0..4).collect(),
            k: ShotCount::K(k),
            p_minus: None,
            upsample: false,
            exclusion: None,
            train,
            test_limit: None,
        }
    }

    /// Zero-shot spans verbalizers; demonstrations add data seeds; tuning
    /// adds train seeds.
    pub fn cells(&self) -> Vec<Cell> {
        let data: Vec<Option<u64>> = if self.method.uses_data() {
            self.data_seeds.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        let train: Vec<Option<u64>> = if self.method.uses_train_seed() {
            self.train_seeds.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        let mut out = Vec::new();
        for v in 0..self.verbalizers.len() {
            for &d in &data {
                for &t in &train {
                    out.push(Cell {
                        verbalizer: v,
                        data_seed: d,
                        train_seed: t,
                    });
                }
            }
        }
        out
    }

    pub fn sampling_spec(&self, data_seed: u64, num_labels: usize) -> SamplingSpec {
        SamplingSpec {
            k: self.k,
            data_seed,
            p_minus: self.p_minus,
            upsample: self.upsample,
            excluded_label: self.exclusion.map(|e| match e {
                Exclusion::Fixed(l) => l,
                Exclusion::RandomPerSeed => random_excluded_label(num_labels, data_seed),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.verbalizers.is_empty() {
            return Err(Error::Config("grid needs at least one verbalizer".into()));
        }
        if self.method.uses_data() && self.data_seeds.is_empty() {
            return Err(Error::Config("grid needs at least one data seed".into()));
        }
        if self.method.uses_train_seed() && self.train_seeds.is_empty() {
            return Err(Error::Config("tuning grid needs at least one train seed".into()));
        }
        if let MethodSpec::Scoring(s) = &self.method {
            if s.mode != Mode::ZeroShot && self.k == ShotCount::Full {
                return Err(Error::NotApplicable(
                    "demonstration methods cannot hold the full training pool in context".into(),
                ));
            }
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub method: MethodSpec,
    pub cell: Cell,
    pub verbalizer: String,
    pub k: ShotCount,
    pub p_minus: Option<f64>,
    pub upsample: bool,
    pub excluded_label: Option<usize>,
    pub selected_lr: Option<f64>,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub error: Option<String>,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    /// Fraction of test predictions equal to `label`.
    pub fn prediction_rate(&self, label: usize) -> f64 {
        if self.predictions.is_empty() {
            return 0.0;
        }
        self.predictions.iter().filter(|&&p| p == label).count() as f64 / self.predictions.len() as f64
    }
}

pub fn accuracy(predictions: &[usize], test: &Dataset) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(&test.examples).filter(|(p, e)| **p == e.label).count();
    hits as f64 / predictions.len() as f64
}

/// Accuracy of always predicting the most frequent test label.
pub fn majority_baseline(test: &Dataset) -> f64 {
    test.majority_rate()
}

/// Pretrained LM with the data its grids draw from.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub lm: LanguageModel,
    pub train_pool: Dataset,
    pub test: Dataset,
}

fn test_slice(test: &Dataset, limit: Option<usize>) -> Dataset {
    let mut t = test.clone();
    if let Some(n) = limit {
        t.examples.truncate(n);
    }
    t
}

pub(crate) fn blank_result(grid: &ExperimentGrid, cell: Cell) -> RunResult {
    RunResult {
        task: grid.task.clone(),
        method: grid.method.clone(),
        cell,
        verbalizer: grid.verbalizers[cell.verbalizer].name.clone(),
        k: grid.k,
        p_minus: grid.p_minus,
        upsample: grid.upsample,
        excluded_label: None,
        selected_lr: None,
        accuracy: 0.0,
        predictions: Vec::new(),
        error: None,
    }
}

/// Runs one cell; reproducible from its coordinates alone.
pub fn run_cell(bench: &Workbench, grid: &ExperimentGrid, cell: Cell) -> RunResult {
    let test = test_slice(&bench.test, grid.test_limit);
    let mut result = blank_result(grid, cell);
    let fewshot = match cell.data_seed {
        Some(seed) => {
            let spec = grid.sampling_spec(seed, bench.train_pool.num_labels());
            result.excluded_label = spec.excluded_label;
            match sample_fewshot(&bench.train_pool, &spec) {
                Ok(f) => Some(f),
                Err(e) => {
                    result.error = Some(e.to_string());
                    return result;
                }
            }
        }
        None => None,
    };
    match evaluate(bench, grid, cell, fewshot.as_ref(), &test) {
        Ok((preds, lr)) => {
            result.accuracy = accuracy(&preds, &test);
            result.predictions = preds;
            result.selected_lr = lr;
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

fn evaluate(
    bench: &Workbench,
    grid: &ExperimentGrid,
    cell: Cell,
    fewshot: Option<&FewShotSet>,
    test: &Dataset,
) -> Result<(Vec<usize>, Option<f64>)> {
    let verbalizer = &grid.verbalizers[cell.verbalizer];
    let texts: Vec<&str> = test.examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = &bench.lm.vocab;
    match &grid.method {
        MethodSpec::Scoring(spec) => {
            let scorer = Scorer::new(bench.lm.view(), vocab, spec, fewshot, verbalizer)?;
            let scores = scorer.score_batch(&texts)?;
            Ok((scores.into_iter().map(|s| s.chosen).collect(), None))
        }
        MethodSpec::Tuning { method } => {
            let fewshot = fewshot.ok_or_else(|| Error::Config("tuning needs a few-shot set".into()))?;
            let mut config = grid.train.clone();
            config.seed = cell.train_seed.unwrap_or(0);
            let pairs = training_pairs(vocab, fewshot, verbalizer, method.direction())?;
            let sel = select_lr(*method, &bench.lm.params, vocab, &pairs, &config)?;
            let outcome = sel.outcome.ok_or(Error::Diverged {
                step: 0,
                loss: f64::INFINITY,
            })?;
            let scorer = outcome.model.scorer(vocab, verbalizer)?;
            let scores = scorer.score_batch(&texts)?;
            Ok((scores.into_iter().map(|s| s.chosen).collect(), Some(sel.chosen)))
        }
    }
}

/// Runs every cell, up to `workers` at a time. Failed cells are recorded and
/// the grid continues. Results come back in cell order.
pub fn run_grid(bench: &Workbench, grid: &ExperimentGrid, workers: usize) -> Result<Vec<RunResult>> {
    grid.validate()?;
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut results: Vec<RunResult> = pool.install(|| cells.par_iter().map(|&c| run_cell(bench, grid, c)).collect());
    results.sort_by_key(|r| r.cell);
    for r in results.iter().filter(|r| !r.ok()) {
        log::warn!("{} cell {:?} failed: {}", grid.method.label(), r.cell, r.error.as_deref().unwrap_or(""));
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: String,
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub avg: f64,
    pub worst: f64,
    pub best: f64,
    pub std: f64,
    /// False when some cells failed; statistics then cover completed cells.
    pub complete: bool,
}

/// Mean, min, max and population standard deviation.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let avg = values.iter().sum::<f64>() / n;
    let worst = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let var = values.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / n;
    // the mean of identical values can differ from them in the last bit
    Some((avg.clamp(worst, best), worst, best, var.sqrt()))
}

pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty result list".into()))?;
    let acc: Vec<f64> = results.iter().filter(|r| r.ok()).map(|r| r.accuracy).collect();
    let failed = results.len() - acc.len();
    let (avg, worst, best, std) = summarize(&acc).unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    Ok(Aggregate {
        task: first.task.clone(),
        method: first.method.label(),
        runs: results.len(),
        failed,
        avg,
        worst,
        best,
        std,
        complete: failed == 0,
    })
}

/// Aggregates grouped by (task, method label), in sorted order.
pub fn aggregate_by_method(results: &[RunResult]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String), Vec<RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.task.clone(), r.method.label())).or_default().push(r.clone());
    }
    groups.values().filter_map(|g| aggregate(g).ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Method;

    fn result(acc: f64) -> RunResult {
        RunResult {
            task: "t".into(),
            method: MethodSpec::Scoring(ScoringSpec::new(Method::Channel, Mode::Concat)),
            cell: Cell {
                verbalizer: 0,
                data_seed: Some(0),
                train_seed: None,
            },
            verbalizer: "v0".into(),
            k: ShotCount::K(16),
            p_minus: None,
            upsample: false,
            excluded_label: None,
            selected_lr: None,
            accuracy: acc,
            predictions: vec![],
            error: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[result(0.5)]).unwrap();
        assert_eq!((a.avg, a.worst, a.best, a.std), (0.5, 0.5, 0.5, 0.0));
        let b = aggregate(&[result(0.4), result(0.6)]).unwrap();
        assert!((b.avg - 0.5).abs() < 1e-12 && (b.std - 0.1).abs() < 1e-12);
        assert_eq!((b.worst, b.best), (0.4, 0.6));
        let mut failed = result(0.0);
        failed.error = Some("boom".into());
        let c = aggregate(&[result(0.7), failed]).unwrap();
        assert!(!c.complete);
        assert_eq!(c.avg, 0.7);
    }

    #[test]
    fn grid_shapes() {
        let verbs: Vec<Verbalizer> = (0..4)
            .map(|i| Verbalizer::new(format!("v{i}"), vec![format!("a{i}"), format!("b{i}")]).unwrap())
            .collect();
        let mk = |m| ExperimentGrid::standard("t", m, verbs.clone(), 16, TrainConfig::default());
        assert_eq!(mk(MethodSpec::Scoring(ScoringSpec::new(Method::Direct, Mode::ZeroShot))).cells().len(), 4);
        assert_eq!(mk(MethodSpec::Scoring(ScoringSpec::new(Method::Channel, Mode::Ensemble))).cells().len(), 20);
        assert_eq!(mk(MethodSpec::tuning(TuningMethod::HeadTuning)).cells().len(), 80);
    }
}
