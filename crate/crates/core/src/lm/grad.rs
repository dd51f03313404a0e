//! Exact reverse-mode gradients of the target-span NLL, restricted to a
//! declared parameter subset.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::model::{backward, forward, Item, LmView};
use super::params::LmParams;
use super::vocab::{TokenId, TokenSeq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradientSubset {
    HeadOnly,
    TransformOnly,
    PromptEmbeddingsOnly,
    AllParams,
}

/// One training pair: the context conditions, only the target span is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub context: TokenSeq,
    pub target: TokenSeq,
}

/// Gradients for exactly one subset; the other slots are `None`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub subset: GradientSubset,
    pub head: Option<Array2<f64>>,
    pub transform: Option<Array2<f64>>,
    pub prompts: Option<Array2<f64>>,
    /// Full-parameter gradient. When the head is tied its contribution is
    /// folded into `embedding`.
    pub params: Option<LmParams>,
}

impl Gradients {
    /// Flat views of the produced gradient tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for m in [&self.head, &self.transform, &self.prompts].into_iter().flatten() {
            out.push(m.as_slice().expect("contiguous"));
        }
        if let Some(p) = &self.params {
            out.extend(p.tensors().into_iter().map(|(_, t)| t));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Loss value with its gradient.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Summed target NLL divided by the number of target tokens in the batch.
    pub loss: f64,
    pub target_tokens: usize,
    pub grads: Gradients,
}

fn check_subset(view: &LmView, subset: GradientSubset) -> Result<()> {
    let ok = match subset {
        GradientSubset::HeadOnly => view.head.is_some() || !view.params.is_tied(),
        GradientSubset::TransformOnly => view.transform.is_some(),
        GradientSubset::PromptEmbeddingsOnly => view.prompts.is_some(),
        GradientSubset::AllParams => {
            view.head.is_none() && view.transform.is_none() && view.prompts.is_none()
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient subset {subset:?} inconsistent with the tuning state"
        )))
    }
}

struct Prepared {
    seqs: Vec<Vec<Item>>,
    /// Packed row predicting each target token, and that token.
    predict_rows: Vec<usize>,
    targets: Vec<TokenId>,
}

fn prepare(view: &LmView, bos: TokenId, batch: &[TrainPair]) -> Result<Prepared> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut seqs = Vec::with_capacity(batch.len());
    let mut predict_rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for pair in batch {
        let items = view.sequence(bos, &[&pair.context, &pair.target]);
        let start = items.len() - pair.target.len();
        for (i, &y) in pair.target.ids().iter().enumerate() {
            predict_rows.push(offset + start + i - 1);
            targets.push(y);
        }
        offset += items.len();
        seqs.push(items);
    }
    if targets.is_empty() {
        return Err(Error::Config("training batch has no target tokens".into()));
    }
    Ok(Prepared {
        seqs,
        predict_rows,
        targets,
    })
}

/// Loss and gradient of the head given final hidden states of the predicting
/// positions. Returns `(summed NLL, d hidden, d head, d transform)`.
fn head_backward(
    view: &LmView,
    hidden: &Array2<f64>,
    targets: &[TokenId],
    scale: f64,
    want_head: bool,
    want_transform: bool,
) -> (f64, Array2<f64>, Option<Array2<f64>>, Option<Array2<f64>>) {
    let o = view.head_matrix();
    let projected = match view.transform {
        Some(u) => hidden.dot(&u.t()),
        None => hidden.clone(),
    };
    let mut dz = view.log_softmax_rows(hidden.view());
    let mut nll = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let mut row = dz.row_mut(r);
        nll -= row[y as usize];
        row.mapv_inplace(f64::exp);
        row[y as usize] -= 1.0;
        row.mapv_inplace(|g| g * scale);
    }
    let dproj = dz.dot(o);
    let dhead = want_head.then(|| dz.t().dot(&projected));
    let (dhidden, dtransform) = match view.transform {
        Some(u) => (dproj.dot(u), want_transform.then(|| dproj.t().dot(hidden))),
        None => (dproj, None),
    };
    (nll, dhidden, dhead, dtransform)
}

/// Mean target-token NLL of `batch` and its exact gradient with respect to
/// `subset`. Parameters outside the subset get no gradient at all.
pub fn compute_gradients(
    view: &LmView,
    bos: TokenId,
    batch: &[TrainPair],
    subset: GradientSubset,
) -> Result<LossAndGrad> {
    check_subset(view, subset)?;
    let prep = prepare(view, bos, batch)?;
    let needs_body = matches!(
        subset,
        GradientSubset::PromptEmbeddingsOnly | GradientSubset::AllParams
    );
    let pass = forward(view, &prep.seqs, None, needs_body, false)?;
    let hidden_sel = pass.hidden.select(ndarray::Axis(0), &prep.predict_rows);
    let count = prep.targets.len();
    let scale = 1.0 / count as f64;
    let want_head = matches!(subset, GradientSubset::HeadOnly | GradientSubset::AllParams);
    let (nll, dsel, dhead, dtransform) = head_backward(
        view,
        &hidden_sel,
        &prep.targets,
        scale,
        want_head,
        subset == GradientSubset::TransformOnly,
    );
    let loss = nll / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} over {count} target tokens"
        )));
    }
    let mut grads = Gradients {
        subset,
        head: None,
        transform: None,
        prompts: None,
        params: None,
    };
    match subset {
        GradientSubset::HeadOnly => grads.head = dhead,
        GradientSubset::TransformOnly => grads.transform = dtransform,
        GradientSubset::PromptEmbeddingsOnly | GradientSubset::AllParams => {
            let mut dhidden = Array2::zeros(pass.hidden.raw_dim());
            for (r, &row) in prep.predict_rows.iter().enumerate() {
                let mut dst = dhidden.row_mut(row);
                dst += &dsel.row(r);
            }
            let all = subset == GradientSubset::AllParams;
            let body = backward(view, &prep.seqs, &pass, dhidden, all, !all);
            grads.prompts = body.prompts;
            if let Some(mut g) = body.params {
                let dhead = dhead.expect("head gradient requested");
                match g.head_mut() {
                    Some(h) => *h = dhead,
                    None => g.embedding += &dhead,
                }
                grads.params = Some(g);
            }
        }
    }
    Ok(LossAndGrad {
        loss,
        target_tokens: count,
        grads,
    })
}

/// Mean target NLL without gradients.
pub fn batch_loss(view: &LmView, bos: TokenId, batch: &[TrainPair]) -> Result<f64> {
    let prep = prepare(view, bos, batch)?;
    let pass = forward(view, &prep.seqs, None, false, false)?;
    let hidden_sel = pass.hidden.select(ndarray::Axis(0), &prep.predict_rows);
    let logp = view.log_softmax_rows(hidden_sel.view());
    let nll: f64 = prep
        .targets
        .iter()
        .enumerate()
        .map(|(r, &y)| -logp[[r, y as usize]])
        .sum();
    Ok(nll / prep.targets.len() as f64)
}

/// Final hidden states of the target-predicting positions of each pair.
///
/// When only the head or the transform trains, these do not change during
/// training, so tuning computes them once and reuses them every step.
#[derive(Debug, Clone)]
pub struct HeadFeatures {
    hidden: Vec<Array2<f64>>,
    targets: Vec<Vec<TokenId>>,
}

impl HeadFeatures {
    pub fn compute(view: &LmView, bos: TokenId, pairs: &[TrainPair]) -> Result<Self> {
        let prep = prepare(view, bos, pairs)?;
        let pass = forward(view, &prep.seqs, None, false, false)?;
        let mut hidden = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let end = pass.offsets[i + 1];
            let n = pair.target.len();
            hidden.push(pass.hidden.slice(s![end - n - 1..end - 1, ..]).to_owned());
            targets.push(pair.target.ids().to_vec());
        }
        Ok(Self { hidden, targets })
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    /// Loss and gradient over the pairs at `indices`, for `HeadOnly` or
    /// `TransformOnly`. Equal to [`compute_gradients`] on the same pairs.
    pub fn gradients(
        &self,
        view: &LmView,
        indices: &[usize],
        subset: GradientSubset,
    ) -> Result<LossAndGrad> {
        if !matches!(subset, GradientSubset::HeadOnly | GradientSubset::TransformOnly) {
            return Err(Error::Config(format!("{subset:?} needs the full backward pass")));
        }
        check_subset(view, subset)?;
        let views: Vec<_> = indices.iter().map(|&i| self.hidden[i].view()).collect();
        let hidden = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Config(e.to_string()))?;
        let targets: Vec<TokenId> = indices
            .iter()
            .flat_map(|&i| self.targets[i].iter().copied())
            .collect();
        if targets.is_empty() {
            return Err(Error::Config("training batch has no target tokens".into()));
        }
        let count = targets.len();
        let (nll, _, dhead, dtransform) = head_backward(
            view,
            &hidden,
            &targets,
            1.0 / count as f64,
            subset == GradientSubset::HeadOnly,
            subset == GradientSubset::TransformOnly,
        );
        let loss = nll / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        Ok(LossAndGrad {
            loss,
            target_tokens: count,
            grads: Gradients {
                subset,
                head: dhead,
                transform: dtransform,
                prompts: None,
                params: None,
            },
        })
    }
}
