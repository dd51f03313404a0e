//! Few-shot draws from a training pool: uniform, exact-imbalance,
//! label-excluded, and upsampled.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};

/// Label index treated as c⁻ by `p_minus`; index 0 is c⁺.
pub const MINUS_LABEL: usize = 1;

/// Serialized as a number or the string `"full"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ShotRepr", into = "ShotRepr")]
pub enum ShotCount {
    K(usize),
    /// The whole (filtered) training pool.
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotRepr {
    K(usize),
    Word(String),
}

impl From<ShotCount> for ShotRepr {
    fn from(k: ShotCount) -> Self {
        match k {
            ShotCount::K(k) => ShotRepr::K(k),
            ShotCount::Full => ShotRepr::Word("full".into()),
        }
    }
}

impl TryFrom<ShotRepr> for ShotCount {
    type Error = String;
    fn try_from(r: ShotRepr) -> std::result::Result<Self, String> {
        match r {
            ShotRepr::K(k) => Ok(ShotCount::K(k)),
            ShotRepr::Word(w) if w == "full" => Ok(ShotCount::Full),
            ShotRepr::Word(w) => Err(format!("K must be a number or \"full\", got {w:?}")),
        }
    }
}

impl std::fmt::Display for ShotCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShotCount::K(k) => write!(f, "{k}"),
            ShotCount::Full => f.write_str("full"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub k: ShotCount,
    pub data_seed: u64,
    pub p_minus: Option<f64>,
    pub upsample: bool,
    pub excluded_label: Option<usize>,
}

impl SamplingSpec {
    pub fn uniform(k: usize, data_seed: u64) -> Self {
        Self {
            k: ShotCount::K(k),
            data_seed,
            p_minus: None,
            upsample: false,
            excluded_label: None,
        }
    }

    fn validate(&self, num_labels: usize) -> Result<()> {
        if let Some(p) = self.p_minus {
            if num_labels != 2 {
                return Err(Error::Config("p_minus needs a binary label set".into()));
            }
            if !(0.0..=0.5).contains(&p) {
                return Err(Error::Config(format!("p_minus {p} outside [0, 0.5]")));
            }
        }
        if let Some(l) = self.excluded_label {
            if l >= num_labels {
                return Err(Error::Config(format!("excluded label {l} not in the label set")));
            }
        }
        if self.k == ShotCount::K(0) {
            return Err(Error::Config("K must be positive".into()));
        }
        Ok(())
    }

    /// Number of c⁻ examples under `p_minus` (round half away from zero).
    pub fn minus_count(&self, k: usize) -> Option<usize> {
        self.p_minus.map(|p| (p * k as f64).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
    pub provenance: SamplingSpec,
}

impl FewShotSet {
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

    pub fn permuted(&self, order: &[usize]) -> FewShotSet {
        FewShotSet {
            examples: order.iter().map(|&i| self.examples[i].clone()).collect(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Excluded label for the unseen-label ablation, drawn per data seed.
pub fn random_excluded_label(num_labels: usize, data_seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed ^ 0x5eed_e7c1_0de0_0001);
    rng.gen_range(0..num_labels)
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::Config(format!(
            "need {n} {what} examples but the pool has {}",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

pub fn sample_fewshot(dataset: &Dataset, spec: &SamplingSpec) -> Result<FewShotSet> {
    spec.validate(dataset.num_labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let pool: Vec<usize> = (0..dataset.len())
        .filter(|&i| Some(dataset.examples[i].label) != spec.excluded_label)
        .collect();
    let k = match spec.k {
        ShotCount::K(k) => k,
        ShotCount::Full => pool.len(),
    };

    let mut chosen = match spec.minus_count(k) {
        None => draw(&pool, k, &mut rng, "training")?,
        Some(n_minus) => {
            let (minus, plus): (Vec<usize>, Vec<usize>) = pool
                .iter()
                .partition(|&&i| dataset.examples[i].label == MINUS_LABEL);
            let mut c = draw(&minus, n_minus, &mut rng, "c-")?;
            c.extend(draw(&plus, k - n_minus, &mut rng, "c+")?);
            c.shuffle(&mut rng);
            c
        }
    };

    if spec.upsample {
        let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_labels()];
        for &i in &chosen {
            by_label[dataset.examples[i].label].push(i);
        }
        let target = by_label.iter().map(Vec::len).max().unwrap_or(0);
        for group in by_label.iter().filter(|g| !g.is_empty()) {
            for j in group.len()..target {
                chosen.push(group[j % group.len()]);
            }
        }
        chosen.shuffle(&mut rng);
    }

    Ok(FewShotSet {
        examples: chosen.into_iter().map(|i| dataset.examples[i].clone()).collect(),
        labels: dataset.labels.clone(),
        provenance: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;

    fn balanced_pool(n: usize) -> Dataset {
        Dataset {
            name: "pool".into(),
            labels: vec!["pos".into(), "neg".into()],
            split: Split::TrainPool,
            examples: (0..n)
                .map(|i| Example {
                    text: format!("t{i}"),
                    label: i % 2,
                })
                .collect(),
        }
    }

    #[test]
    fn exact_imbalance_counts() {
        let d = balanced_pool(200);
        let mut spec = SamplingSpec::uniform(16, 4);
        spec.p_minus = Some(0.5);
        assert_eq!(sample_fewshot(&d, &spec).unwrap().label_counts(), vec![8, 8]);
        spec.p_minus = Some(0.0);
        assert_eq!(sample_fewshot(&d, &spec).unwrap().label_counts(), vec![16, 0]);
        spec.p_minus = Some(0.125);
        assert_eq!(sample_fewshot(&d, &spec).unwrap().label_counts(), vec![14, 2]);
    }

    #[test]
    fn upsampling_equalizes_multiplicity() {
        let d = balanced_pool(200);
        let mut spec = SamplingSpec::uniform(4, 1);
        spec.p_minus = Some(0.25);
        spec.upsample = true;
        let s = sample_fewshot(&d, &spec).unwrap();
        assert_eq!(s.label_counts(), vec![3, 3]);
        let minus: Vec<_> = s.examples.iter().filter(|e| e.label == 1).collect();
        assert!(minus.iter().all(|e| e.text == minus[0].text));
    }

    #[test]
    fn minority_count_is_unbiased() {
        let d = balanced_pool(1000);
        let mean: f64 = (0..1000)
            .map(|seed| sample_fewshot(&d, &SamplingSpec::uniform(16, seed)).unwrap().label_counts()[MINUS_LABEL] as f64)
            .sum::<f64>()
            / 1000.0;
        assert!((7.5..=8.5).contains(&mean), "{mean}");
    }

    #[test]
    fn same_spec_same_set() {
        let d = balanced_pool(300);
        let spec = SamplingSpec::uniform(16, 77);
        let a = serde_json::to_string(&sample_fewshot(&d, &spec).unwrap()).unwrap();
        let b = serde_json::to_string(&sample_fewshot(&d, &spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn excluded_label_never_drawn() {
        let d = balanced_pool(300);
        for seed in 0..50 {
            let mut spec = SamplingSpec::uniform(16, seed);
            spec.excluded_label = Some(random_excluded_label(2, seed));
            let s = sample_fewshot(&d, &spec).unwrap();
            assert!(s.examples.iter().all(|e| Some(e.label) != spec.excluded_label));
        }
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let mut d = balanced_pool(20);
        let mut spec = SamplingSpec::uniform(4, 0);
        spec.p_minus = Some(0.7);
        assert!(sample_fewshot(&d, &spec).is_err());
        d.labels.push("x".into());
        spec.p_minus = Some(0.5);
        assert!(sample_fewshot(&d, &spec).is_err());
        assert!(sample_fewshot(&balanced_pool(3), &SamplingSpec::uniform(4, 0)).is_err());
    }
}
