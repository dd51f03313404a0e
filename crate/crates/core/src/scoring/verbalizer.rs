use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps each label of a task to the text the LM scores for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub name: String,
    /// Surface string per label, indexed like the task's label set.
    pub surfaces: Vec<String>,
}

impl Verbalizer {
    pub fn new(name: impl Into<String>, surfaces: Vec<String>) -> Result<Self> {
        let v = Self {
            name: name.into(),
            surfaces,
        };
        v.validate()?;
        Ok(v)
    }

    /// Fills `template`'s `{}` with each label word.
    pub fn from_template(name: impl Into<String>, template: &str, label_words: &[&str]) -> Result<Self> {
        Self::new(
            name,
            label_words.iter().map(|w| template.replace("{}", w)).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() {
            return Err(Error::Config(format!("verbalizer {} maps no labels", self.name)));
        }
        if self.surfaces.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Config(format!("verbalizer {} has an empty surface", self.name)));
        }
        let unique: HashSet<&String> = self.surfaces.iter().collect();
        if unique.len() != self.surfaces.len() {
            return Err(Error::Config(format!(
                "verbalizer {} maps distinct labels to the same text",
                self.name
            )));
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, label: usize) -> &str {
        &self.surfaces[label]
    }
}

/// On-disk set of named verbalizers for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerFile {
    pub task: String,
    pub labels: Vec<String>,
    pub verbalizers: Vec<VerbalizerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerEntry {
    pub name: String,
    /// `label name -> surface`, in label order.
    pub mapping: Vec<(String, String)>,
}

impl VerbalizerFile {
    pub fn from_verbalizers(task: &str, labels: &[String], verbalizers: &[Verbalizer]) -> Self {
        Self {
            task: task.to_string(),
            labels: labels.to_vec(),
            verbalizers: verbalizers
                .iter()
                .map(|v| VerbalizerEntry {
                    name: v.name.clone(),
                    mapping: labels.iter().cloned().zip(v.surfaces.iter().cloned()).collect(),
                })
                .collect(),
        }
    }

    /// Resolves entries against the label set; every label must be mapped.
    pub fn verbalizers(&self) -> Result<Vec<Verbalizer>> {
        self.verbalizers
            .iter()
            .map(|e| {
                let mut surfaces = Vec::with_capacity(self.labels.len());
                for label in &self.labels {
                    let s = e
                        .mapping
                        .iter()
                        .find(|(l, _)| l == label)
                        .map(|(_, s)| s.clone())
                        .ok_or_else(|| {
                            Error::Config(format!("verbalizer {} does not map label {label:?}", e.name))
                        })?;
                    surfaces.push(s);
                }
                if let Some((l, _)) = e.mapping.iter().find(|(l, _)| !self.labels.contains(l)) {
                    return Err(Error::Config(format!("verbalizer {} maps unknown label {l:?}", e.name)));
                }
                Verbalizer::new(e.name.clone(), surfaces)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_fill() {
        let v = Verbalizer::from_template("v0", "it was {} .", &["great", "terrible"]).unwrap();
        assert_eq!(v.surface(0), "it was great .");
        assert_eq!(v.surface(1), "it was terrible .");
    }

    #[test]
    fn rejects_collisions_and_empties() {
        assert!(Verbalizer::new("x", vec!["a".into(), "a".into()]).is_err());
        assert!(Verbalizer::new("x", vec!["a".into(), " ".into()]).is_err());
    }

    #[test]
    fn file_round_trip_and_missing_label() {
        let labels = vec!["positive".to_string(), "negative".to_string()];
        let v = Verbalizer::from_template("v0", "a {} one .", &["great", "terrible"]).unwrap();
        let file = VerbalizerFile::from_verbalizers("sst2", &labels, &[v.clone()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verb.json");
        file.save(&path).unwrap();
        let back = VerbalizerFile::load(&path).unwrap();
        assert_eq!(back.verbalizers().unwrap(), vec![v]);

        let mut broken = back.clone();
        broken.verbalizers[0].mapping.pop();
        assert!(broken.verbalizers().is_err());
    }
}
