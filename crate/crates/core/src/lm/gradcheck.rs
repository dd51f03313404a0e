//! Central finite-difference check of [`compute_gradients`]. The difference
//! quotients use only the forward loss, never the reverse pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{batch_loss, compute_gradients, GradientSubset, TrainPair};
use super::model::LmView;
use super::params::LmParams;
use super::vocab::TokenId;
use crate::error::Result;

/// Owned counterpart of [`LmView`], for code that mutates overlays.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedView {
    pub params: LmParams,
    pub head: Option<Array2<f64>>,
    pub transform: Option<Array2<f64>>,
    pub prompts: Option<Array2<f64>>,
}

impl OwnedView {
    pub fn new(params: LmParams) -> Self {
        Self {
            params,
            head: None,
            transform: None,
            prompts: None,
        }
    }

    pub fn view(&self) -> LmView<'_> {
        LmView {
            params: &self.params,
            head: self.head.as_ref(),
            transform: self.transform.as_ref(),
            prompts: self.prompts.as_ref(),
        }
    }

    /// Flat tensors of the given subset, in the same order as
    /// [`super::Gradients::tensors`].
    fn subset_tensors_mut(&mut self, subset: GradientSubset) -> Vec<&mut [f64]> {
        match subset {
            GradientSubset::HeadOnly => match &mut self.head {
                Some(h) => vec![h.as_slice_mut().unwrap()],
                None => vec![self
                    .params
                    .head_mut()
                    .expect("HeadOnly needs an untied head")
                    .as_slice_mut()
                    .unwrap()],
            },
            GradientSubset::TransformOnly => {
                vec![self.transform.as_mut().expect("transform").as_slice_mut().unwrap()]
            }
            GradientSubset::PromptEmbeddingsOnly => {
                vec![self.prompts.as_mut().expect("prompts").as_slice_mut().unwrap()]
            }
            GradientSubset::AllParams => self.params.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub subset: GradientSubset,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-6;

/// Compares `coords` randomly chosen gradient entries of `subset` against
/// central differences with step [`FD_STEP`].
pub fn check_gradients(
    model: &OwnedView,
    bos: TokenId,
    batch: &[TrainPair],
    subset: GradientSubset,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = compute_gradients(&model.view(), bos, batch, subset)?;
    let flat: Vec<f64> = analytic
        .grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut failures = 0;
    for _ in 0..coords {
        let idx = rng.gen_range(0..flat.len());
        let original = read_coord(&mut probe, subset, idx);
        write_coord(&mut probe, subset, idx, original + FD_STEP);
        let up = batch_loss(&probe.view(), bos, batch)?;
        write_coord(&mut probe, subset, idx, original - FD_STEP);
        let down = batch_loss(&probe.view(), bos, batch)?;
        write_coord(&mut probe, subset, idx, original);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = relative_error(flat[idx], numeric, FD_FLOOR);
        max_rel = max_rel.max(rel);
        if rel >= FD_REL_TOL {
            failures += 1;
        }
    }
    Ok(GradCheckReport {
        subset,
        checked: coords,
        max_rel_err: max_rel,
        failures,
        tolerance: FD_REL_TOL,
    })
}

fn locate(tensors: &[&mut [f64]], mut idx: usize) -> (usize, usize) {
    for (k, t) in tensors.iter().enumerate() {
        if idx < t.len() {
            return (k, idx);
        }
        idx -= t.len();
    }
    panic!("coordinate out of range");
}

fn read_coord(m: &mut OwnedView, subset: GradientSubset, idx: usize) -> f64 {
    let ts = m.subset_tensors_mut(subset);
    let (k, i) = locate(&ts, idx);
    ts[k][i]
}

fn write_coord(m: &mut OwnedView, subset: GradientSubset, idx: usize, value: f64) {
    let mut ts = m.subset_tensors_mut(subset);
    let (k, i) = locate(&ts, idx);
    ts[k][i] = value;
}
