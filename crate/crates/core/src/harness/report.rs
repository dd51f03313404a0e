//! Result files: line-delimited run records, a delimited summary table and
//! curve triples. Identical inputs give byte-identical files.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{aggregate_by_method, Aggregate, CurvePoint, RunResult};
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TABLE_FILE: &str = "table.tsv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub method: String,
    pub mode: String,
    pub k: String,
    pub p_minus: Option<f64>,
    pub upsample: bool,
    pub excluded_label: Option<usize>,
    pub verbalizer: String,
    pub data_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub lr: Option<f64>,
    pub accuracy: f64,
    pub error: Option<String>,
    pub config_hash: String,
    pub code_version: String,
    pub run: RunResult,
}

impl ResultRecord {
    pub fn new(run: &RunResult, config_hash: &str) -> Self {
        Self {
            task: run.task.clone(),
            method: run.method.label(),
            mode: run.method.mode(),
            k: run.k.to_string(),
            p_minus: run.p_minus,
            upsample: run.upsample,
            excluded_label: run.excluded_label,
            verbalizer: run.verbalizer.clone(),
            data_seed: run.cell.data_seed,
            train_seed: run.cell.train_seed,
            lr: run.selected_lr,
            accuracy: run.accuracy,
            error: run.error.clone(),
            config_hash: config_hash.to_string(),
            code_version: code_version(),
            run: run.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<RunResult>,
    pub curves: Vec<CurvePoint>,
}

/// Table with one row per aggregate, accuracies in percent.
pub fn render_table(aggregates: &[Aggregate]) -> String {
    let mut out = String::from("method\ttask\tavg\tworst\tbest\tstd\truns\tfailed\n");
    for a in aggregates {
        out.push_str(&format!(
            "{}\t{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{}\t{}\n",
            a.method,
            a.task,
            100.0 * a.avg,
            100.0 * a.worst,
            100.0 * a.best,
            100.0 * a.std,
            a.runs,
            a.failed
        ));
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the config snapshot, results, table and curves into `dir`.
pub fn write_report(dir: &Path, report: &Report, config: &serde_json::Value) -> Result<Vec<Aggregate>> {
    if report.results.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config_hash(config);
    write_file(&dir.join(CONFIG_FILE), &serde_json::to_string_pretty(config)?)?;

    let mut lines = String::new();
    for r in &report.results {
        lines.push_str(&serde_json::to_string(&ResultRecord::new(r, &hash))?);
        lines.push('\n');
    }
    write_file(&dir.join(RESULTS_FILE), &lines)?;

    let aggregates = aggregate_by_method(&report.results);
    write_file(&dir.join(TABLE_FILE), &render_table(&aggregates))?;

    let path = dir.join(CURVES_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["ablation", "x", "series", "value"])?;
    for p in &report.curves {
        w.write_record([p.ablation.as_str(), &p.x, &p.series, &format!("{:.6}", p.value)])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(aggregates)
}

/// Reads every `results.jsonl` under `dir` (one level deep included).
pub fn load_results(dir: &Path) -> Result<Vec<ResultRecord>> {
    let mut files = Vec::new();
    if dir.join(RESULTS_FILE).is_file() {
        files.push(dir.join(RESULTS_FILE));
    }
    if let Ok(entries) = std::fs::read_dir(dir) {
        let mut subdirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        subdirs.sort();
        files.extend(subdirs.into_iter().map(|d| d.join(RESULTS_FILE)).filter(|p| p.is_file()));
    }
    let mut out = Vec::new();
    for f in files {
        let file = std::fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&f, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no results in {}", dir.display())));
    }
    Ok(out)
}

