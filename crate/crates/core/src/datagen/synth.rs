//! Class-conditional synthetic text tasks with a matching unlabeled
//! pretraining corpus.
//!
//! A text of class `c` is a run of words where each position is, with
//! probability `keyword_rate`, a class keyword (Zipf-weighted within the
//! class pool; with probability `overlap` taken from another class's pool)
//! and otherwise a shared filler word. Texts without any keyword are
//! resampled, so the keyword constraint never depends on the class and the
//! exact Bayes classifier is naive Bayes over the per-class unigram
//! distributions.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::lm::NEWLINE;
use crate::scoring::Verbalizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "binary-sentiment-analog")]
    BinarySentiment,
    #[serde(rename = "5-way-sentiment-analog")]
    FiveWaySentiment,
    #[serde(rename = "4-way-topic-analog")]
    FourWayTopic,
    #[serde(rename = "6-way-type-analog")]
    SixWayType,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::BinarySentiment,
        TaskKind::FiveWaySentiment,
        TaskKind::FourWayTopic,
        TaskKind::SixWayType,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::BinarySentiment => "binary-sentiment-analog",
            TaskKind::FiveWaySentiment => "5-way-sentiment-analog",
            TaskKind::FourWayTopic => "4-way-topic-analog",
            TaskKind::SixWayType => "6-way-type-analog",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextLength {
    /// 5 to 15 words.
    Short,
    /// 40 to 200 words.
    Long,
}

impl TextLength {
    pub fn range(&self) -> (usize, usize) {
        match self {
            TextLength::Short => (5, 15),
            TextLength::Long => (40, 200),
        }
    }

    /// Training batch size for this input regime.
    pub fn batch_size(&self) -> usize {
        match self {
            TextLength::Short => 32,
            TextLength::Long => 16,
        }
    }
}

const GREAT: &[&str] = &[
    "superb", "brilliant", "masterful", "stunning", "wonderful", "dazzling", "flawless", "exquisite",
    "gripping", "radiant",
];
const GOOD: &[&str] = &[
    "enjoyable", "pleasant", "solid", "likable", "charming", "fun", "warm", "sweet", "engaging",
    "lively",
];
const OKAY: &[&str] = &[
    "average", "ordinary", "passable", "uneven", "familiar", "modest", "routine", "mild", "standard",
    "middling",
];
const BAD: &[&str] = &[
    "dull", "weak", "bland", "clumsy", "tedious", "flat", "messy", "forgettable", "silly", "sluggish",
];
const TERRIBLE: &[&str] = &[
    "awful", "dreadful", "painful", "unbearable", "atrocious", "horrid", "abysmal", "wretched",
    "incoherent", "insufferable",
];
const SENTIMENT_FILLER: &[&str] = &[
    "the", "film", "movie", "story", "acting", "plot", "is", "this", "and", "its", "with", "of",
    "characters", "director", "script", "scenes", "cast", "ending", "performance", "music",
];

const WORLD: &[&str] = &[
    "minister", "election", "government", "treaty", "embassy", "parliament", "border", "refugees",
    "summit", "diplomat",
];
const SPORTS: &[&str] = &[
    "match", "coach", "league", "tournament", "goal", "season", "striker", "championship",
    "playoff", "athlete",
];
const BUSINESS: &[&str] = &[
    "market", "shares", "profit", "investors", "earnings", "merger", "stocks", "revenue", "bank",
    "economy",
];
const TECH: &[&str] = &[
    "software", "internet", "computer", "chip", "device", "startup", "online", "wireless",
    "browser", "laptop",
];
const NEWS_FILLER: &[&str] = &[
    "the", "a", "of", "in", "on", "to", "for", "said", "has", "report", "new", "after", "over",
    "week", "officials", "monday", "tuesday", "plans", "year", "first",
];

const DESCRIPTION: &[&str] = &[
    "describe", "meaning", "definition", "explain", "cause", "reason", "purpose", "origin",
    "difference", "process",
];
const ENTITY: &[&str] = &[
    "animal", "color", "book", "food", "instrument", "game", "plant", "drink", "vehicle", "disease",
];
const ABBREVIATION: &[&str] = &[
    "abbreviation", "acronym", "stands", "initials", "shortened", "expansion", "short", "letters",
    "abbreviated", "form",
];
const HUMAN: &[&str] = &[
    "who", "person", "inventor", "president", "author", "founder", "actor", "leader", "painter",
    "scientist",
];
const LOCATION: &[&str] = &[
    "where", "city", "country", "state", "river", "mountain", "capital", "continent", "island",
    "lake",
];
const NUMBER: &[&str] = &[
    "many", "year", "date", "population", "distance", "price", "age", "percentage", "temperature",
    "speed",
];
const QUESTION_FILLER: &[&str] = &[
    "what", "the", "of", "is", "a", "in", "was", "did", "to", "for", "does", "first", "which",
    "name", "world", "called", "largest", "most", "are", "do",
];

/// Everything that defines one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    /// Keyword pool per label; the first word is the class's most frequent.
    pub keywords: Vec<Vec<String>>,
    pub filler: Vec<String>,
    /// The word each verbalizer puts in the template slot, per label.
    pub label_words: Vec<String>,
    /// Four verbalizer templates with a `{}` slot.
    pub templates: Vec<String>,
    /// Additional label-word frames seen only in the pretraining corpus.
    pub corpus_frames: Vec<String>,
    pub keyword_rate: f64,
    pub overlap: f64,
    /// Class prior of the training pool.
    pub prior: Vec<f64>,
    pub length: TextLength,
    pub test_size: usize,
    pub corpus_docs: usize,
    /// Fraction of corpus label phrases attached to a text of another class.
    pub corpus_label_noise: f64,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn merged(a: &[&str], b: &[&str]) -> Vec<String> {
    a.iter().zip(b).flat_map(|(x, y)| [x.to_string(), y.to_string()]).collect()
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let sentiment_templates = words(&["a {} one .", "it was {} .", "all in all {} .", "a {} piece ."]);
        let sentiment_frames = words(&["overall {} .", "i found it {} .", "simply {} .", "truly {} ."]);
        let (labels, keywords, filler, label_words, templates, frames) = match kind {
            TaskKind::BinarySentiment => (
                words(&["positive", "negative"]),
                vec![merged(GREAT, GOOD), merged(TERRIBLE, BAD)],
                words(SENTIMENT_FILLER),
                words(&["great", "terrible"]),
                sentiment_templates,
                sentiment_frames,
            ),
            TaskKind::FiveWaySentiment => (
                words(&["very positive", "positive", "neutral", "negative", "very negative"]),
                vec![words(GREAT), words(GOOD), words(OKAY), words(BAD), words(TERRIBLE)],
                words(SENTIMENT_FILLER),
                words(&["great", "good", "okay", "bad", "terrible"]),
                sentiment_templates,
                sentiment_frames,
            ),
            TaskKind::FourWayTopic => (
                words(&["world", "sports", "business", "technology"]),
                vec![words(WORLD), words(SPORTS), words(BUSINESS), words(TECH)],
                words(NEWS_FILLER),
                words(&["world", "sports", "business", "technology"]),
                words(&["topic : {} .", "subject : {} .", "this is about {} .", "it is about {} ."]),
                words(&["news about {} .", "category : {} .", "section : {} .", "more {} news ."]),
            ),
            TaskKind::SixWayType => (
                words(&["description", "entity", "abbreviation", "human", "location", "number"]),
                vec![
                    words(DESCRIPTION),
                    words(ENTITY),
                    words(ABBREVIATION),
                    words(HUMAN),
                    words(LOCATION),
                    words(NUMBER),
                ],
                words(QUESTION_FILLER),
                words(&["description", "entity", "expression", "human", "location", "number"]),
                words(&["{} :", "q : {} :", "why {} ?", "answer : {}"]),
                words(&["type : {}", "asking about {}", "{} question", "expects {}"]),
            ),
        };
        let n = labels.len();
        Self {
            kind,
            labels,
            keywords,
            filler,
            label_words,
            templates,
            corpus_frames: frames,
            keyword_rate: 0.45,
            overlap: 0.03,
            prior: vec![1.0 / n as f64; n],
            length: TextLength::Short,
            test_size: 1000,
            corpus_docs: 3000,
            corpus_label_noise: 0.1,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// The four verbalizers of the task, one per template.
    pub fn verbalizers(&self) -> Vec<Verbalizer> {
        let lw: Vec<&str> = self.label_words.iter().map(String::as_str).collect();
        self.templates
            .iter()
            .enumerate()
            .map(|(i, t)| Verbalizer::from_template(format!("v{i}"), t, &lw).expect("distinct label words"))
            .collect()
    }

    fn keyword_weights(pool: &[String]) -> Vec<f64> {
        (0..pool.len()).map(|r| 1.0 / (r + 1) as f64).collect()
    }

    fn filler_weights(&self) -> Vec<f64> {
        vec![1.0; self.filler.len()]
    }

    /// Exact unigram distribution of class `label`.
    pub fn token_distribution(&self, label: usize) -> HashMap<String, f64> {
        let mut dist: HashMap<String, f64> = HashMap::new();
        let fw = self.filler_weights();
        let fz: f64 = fw.iter().sum();
        for (w, p) in self.filler.iter().zip(&fw) {
            *dist.entry(w.clone()).or_default() += (1.0 - self.keyword_rate) * p / fz;
        }
        let n = self.num_labels();
        for (c, pool) in self.keywords.iter().enumerate() {
            let share = if c == label {
                1.0 - self.overlap
            } else {
                self.overlap / (n - 1) as f64
            };
            let kw = Self::keyword_weights(pool);
            let kz: f64 = kw.iter().sum();
            for (w, p) in pool.iter().zip(&kw) {
                *dist.entry(w.clone()).or_default() += self.keyword_rate * share * p / kz;
            }
        }
        dist
    }

    /// Bayes-optimal prediction under the generating model (uniform prior
    /// when `prior` is `None`).
    pub fn bayes_predict(&self, text: &str, dists: &[HashMap<String, f64>], prior: Option<&[f64]>) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, d) in dists.iter().enumerate() {
            let mut s = prior.map_or(0.0, |p| p[c].ln());
            for w in text.split_whitespace() {
                s += d.get(w).copied().unwrap_or(1e-300).ln();
            }
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    pub fn bayes_accuracy(&self, data: &Dataset) -> f64 {
        let dists: Vec<_> = (0..self.num_labels()).map(|c| self.token_distribution(c)).collect();
        let correct = data
            .examples
            .iter()
            .filter(|e| self.bayes_predict(&e.text, &dists, None) == e.label)
            .count();
        correct as f64 / data.examples.len().max(1) as f64
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_labels();
        if n < 2 || self.keywords.len() != n || self.label_words.len() != n || self.prior.len() != n {
            return Err(Error::Config("task spec label arrays disagree in length".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.keyword_rate) || self.keyword_rate == 0.0 {
            return Err(Error::Config("keyword_rate must be in (0,1], overlap in [0,1)".into()));
        }
        if self.templates.len() != 4 {
            return Err(Error::Config("a task has exactly four verbalizer templates".into()));
        }
        Ok(())
    }
}

struct Sampler<'a> {
    spec: &'a TaskSpec,
    filler: WeightedIndex<f64>,
    keywords: Vec<WeightedIndex<f64>>,
    keyword_set: HashSet<&'a str>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a TaskSpec) -> Self {
        Self {
            spec,
            filler: WeightedIndex::new(spec.filler_weights()).expect("filler weights"),
            keywords: spec
                .keywords
                .iter()
                .map(|p| WeightedIndex::new(TaskSpec::keyword_weights(p)).expect("keyword weights"))
                .collect(),
            keyword_set: spec.keywords.iter().flatten().map(String::as_str).collect(),
        }
    }

    fn text(&self, label: usize, rng: &mut ChaCha8Rng) -> String {
        let (lo, hi) = self.spec.length.range();
        let n = self.spec.num_labels();
        loop {
            let len = rng.gen_range(lo..=hi);
            let mut out: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..len {
                if rng.gen::<f64>() < self.spec.keyword_rate {
                    let mut c = label;
                    if rng.gen::<f64>() < self.spec.overlap {
                        c = (label + rng.gen_range(1..n)) % n;
                    }
                    out.push(&self.spec.keywords[c][self.keywords[c].sample(rng)]);
                } else {
                    out.push(&self.spec.filler[self.filler.sample(rng)]);
                }
            }
            if out.iter().any(|w| self.keyword_set.contains(w)) {
                return out.join(" ");
            }
        }
    }
}

/// Generated task: training pool, balanced test split, and the unlabeled
/// pretraining corpus.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub corpus: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn verbalizers(&self) -> Vec<Verbalizer> {
        self.spec.verbalizers()
    }
}

/// Generates a task with default settings for `kind`.
pub fn generate_synthetic_task(kind: TaskKind, size: usize, seed: u64) -> Result<SyntheticTask> {
    TaskSpec::new(kind).generate(size, seed)
}

impl TaskSpec {
    pub fn generate(&self, size: usize, seed: u64) -> Result<SyntheticTask> {
        self.validate()?;
        let n = self.num_labels();
        if size < n || self.test_size < n {
            return Err(Error::Config(format!(
                "size {size} (test {}) too small for {n} classes",
                self.test_size
            )));
        }
        let sampler = Sampler::new(self);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = WeightedIndex::new(&self.prior).map_err(|e| Error::Config(e.to_string()))?;

        let mut train = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        for _ in 0..size {
            let label = prior.sample(&mut rng);
            let text = sampler.text(label, &mut rng);
            seen.insert(text.clone());
            train.push(Example { text, label });
        }

        let mut test = Vec::with_capacity(self.test_size);
        for i in 0..self.test_size {
            let label = i % n;
            let text = loop {
                let t = sampler.text(label, &mut rng);
                if !seen.contains(&t) {
                    break t;
                }
            };
            test.push(Example { text, label });
        }
        test.shuffle(&mut rng);

        let corpus = (0..self.corpus_docs)
            .map(|_| self.corpus_doc(&sampler, &mut rng))
            .collect();

        let name = self.kind.as_str().to_string();
        Ok(SyntheticTask {
            spec: self.clone(),
            corpus,
            train: Dataset {
                name: name.clone(),
                labels: self.labels.clone(),
                split: Split::TrainPool,
                examples: train,
            },
            test: Dataset {
                name,
                labels: self.labels.clone(),
                split: Split::Test,
                examples: test,
            },
        })
    }

    /// One corpus document: either plain texts, or texts paired with a
    /// phrase carrying the label word of their class. The phrase precedes or
    /// follows the text consistently within a document; pairs are separated
    /// by newlines.
    fn corpus_doc(&self, sampler: &Sampler, rng: &mut ChaCha8Rng) -> String {
        let n = self.num_labels();
        let nl = format!(" {NEWLINE} ");
        if rng.gen::<f64>() < 0.15 {
            let k = rng.gen_range(1..=3);
            return (0..k)
                .map(|_| sampler.text(rng.gen_range(0..n), rng))
                .collect::<Vec<_>>()
                .join(&nl);
        }
        let pairs = if rng.gen::<f64>() < 0.75 {
            rng.gen_range(1..=4)
        } else {
            rng.gen_range(5..=17)
        };
        let label_first = rng.gen::<bool>();
        let mut parts = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let c = rng.gen_range(0..n);
            let text = sampler.text(c, rng);
            let word_class = if rng.gen::<f64>() < self.corpus_label_noise {
                (c + rng.gen_range(1..n)) % n
            } else {
                c
            };
            let frame_idx = rng.gen_range(0..self.templates.len() + self.corpus_frames.len());
            let frame = self
                .templates
                .iter()
                .chain(&self.corpus_frames)
                .nth(frame_idx)
                .unwrap();
            let phrase = frame.replace("{}", &self.label_words[word_class]);
            parts.push(if label_first {
                format!("{phrase} {text}")
            } else {
                format!("{text} {phrase}")
            });
        }
        parts.join(&nl)
    }
}
