//! Labeled datasets: synthetic task generation, file I/O and few-shot
//! sampling regimes.

mod sampling;
mod synth;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use sampling::{random_excluded_label, sample_fewshot, FewShotSet, SamplingSpec, ShotCount, MINUS_LABEL};
pub use synth::{generate_synthetic_task, SyntheticTask, TaskKind, TaskSpec, TextLength};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    /// Index into the dataset's label set.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub labels: Vec<String>,
    pub split: Split,
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    text: &'a str,
    label: &'a str,
}

#[derive(Serialize, Deserialize)]
struct OwnedRecord {
    text: String,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub name: String,
    pub split: Split,
    pub labels: Vec<String>,
}

/// `data/train.jsonl` → `data/train.labels.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("labels.json")
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.labels.len()];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    /// Accuracy of always predicting the most frequent label.
    pub fn majority_rate(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        *self.label_counts().iter().max().unwrap() as f64 / self.examples.len() as f64
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn is_disjoint_from(&self, other: &Dataset) -> bool {
        let mine: HashSet<&str> = self.examples.iter().map(|e| e.text.as_str()).collect();
        other.examples.iter().all(|e| !mine.contains(e.text.as_str()))
    }

    /// Writes line-delimited `{text, label}` records plus the label manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for ex in &self.examples {
            let line = serde_json::to_string(&Record {
                text: &ex.text,
                label: &self.labels[ex.label],
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let manifest = LabelManifest {
            name: self.name.clone(),
            split: self.split,
            labels: self.labels.clone(),
        };
        let mpath = manifest_path(path);
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
    }
}

/// Order-preserving load of a dataset file and its label manifest.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: LabelManifest = serde_json::from_str(&mtext)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OwnedRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        let label = manifest
            .labels
            .iter()
            .position(|l| *l == rec.label)
            .ok_or(Error::UnknownLabel {
                line: line_no,
                label: rec.label.clone(),
            })?;
        examples.push(Example { text: rec.text, label });
    }
    Ok(Dataset {
        name: manifest.name,
        labels: manifest.labels,
        split: manifest.split,
        examples,
    })
}
