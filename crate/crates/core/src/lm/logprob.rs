//! Conditional log-probabilities, directly and through a reusable prefix
//! state.

use ndarray::{concatenate, Array1, Array2, Axis};

use super::model::{forward, Item, KvState, LmView};
use super::vocab::{TokenId, TokenSeq};
use crate::error::{Error, Result};

/// Continuations scored per packed forward pass.
pub const PACK_CHUNK: usize = 128;

fn check_len(view: &LmView, total: usize) -> Result<()> {
    let max = view.params.config.max_seq_len;
    if total > max {
        return Err(Error::Length {
            len: total,
            max,
            k: None,
        });
    }
    Ok(())
}

/// `log P(continuation | BOS, prompts, prefix)` in nats, summed over the
/// continuation tokens. Computed from scratch in one forward pass.
pub fn conditional_logprob(
    view: &LmView,
    bos: TokenId,
    prefix: &TokenSeq,
    continuation: &TokenSeq,
) -> Result<f64> {
    let items = view.sequence(bos, &[prefix, continuation]);
    check_len(view, items.len())?;
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let pass = forward(view, std::slice::from_ref(&items), None, false, false)?;
    let start = items.len() - continuation.len();
    let rows = pass.hidden.slice(ndarray::s![start - 1..items.len() - 1, ..]);
    let logp = view.log_softmax_rows(rows);
    Ok(continuation
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y as usize]])
        .sum())
}

/// Next-token distribution (log domain) after `BOS, prompts, prefix`.
pub fn next_token_logprobs(view: &LmView, bos: TokenId, prefix: &TokenSeq) -> Result<Array1<f64>> {
    let items = view.sequence(bos, &[prefix]);
    check_len(view, items.len())?;
    let pass = forward(view, std::slice::from_ref(&items), None, false, false)?;
    let last = pass.hidden.slice(ndarray::s![items.len() - 1..items.len(), ..]);
    Ok(view.log_softmax_rows(last).row(0).to_owned())
}

/// Keys, values and final hidden state of a processed prefix, so many
/// continuations can be scored against it without recomputation.
#[derive(Debug, Clone)]
pub struct PrefixCache<'a> {
    view: LmView<'a>,
    kv: KvState,
    last_hidden: Array1<f64>,
}

impl<'a> PrefixCache<'a> {
    pub fn new(view: LmView<'a>, bos: TokenId, prefix: &TokenSeq) -> Result<Self> {
        let items = view.sequence(bos, &[prefix]);
        check_len(&view, items.len())?;
        let pass = forward(&view, std::slice::from_ref(&items), None, false, true)?;
        let last_hidden = pass.hidden.row(items.len() - 1).to_owned();
        Ok(Self {
            view,
            kv: pass.kv.expect("requested kv"),
            last_hidden,
        })
    }

    /// Number of positions held, BOS and prompts included.
    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    pub fn view(&self) -> &LmView<'a> {
        &self.view
    }

    /// A new cache covering `self ∥ tokens`.
    pub fn extend(&self, tokens: &TokenSeq) -> Result<Self> {
        if tokens.is_empty() {
            return Ok(self.clone());
        }
        check_len(&self.view, self.len() + tokens.len())?;
        let items: Vec<Item> = tokens.ids().iter().map(|&t| Item::Token(t)).collect();
        let pass = forward(&self.view, std::slice::from_ref(&items), Some(&self.kv), false, true)?;
        let new = pass.kv.expect("requested kv");
        let join = |a: &Array2<f64>, b: &Array2<f64>| concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        Ok(Self {
            view: self.view,
            kv: KvState {
                keys: self.kv.keys.iter().zip(&new.keys).map(|(a, b)| join(a, b)).collect(),
                values: self.kv.values.iter().zip(&new.values).map(|(a, b)| join(a, b)).collect(),
            },
            last_hidden: pass.hidden.row(items.len() - 1).to_owned(),
        })
    }

    pub fn logprob(&self, continuation: &TokenSeq) -> Result<f64> {
        Ok(self.logprobs(&[continuation])?[0])
    }

    /// Summed log-probability of each continuation of this prefix.
    pub fn logprobs(&self, continuations: &[&TokenSeq]) -> Result<Vec<f64>> {
        Ok(self
            .token_logprobs(continuations)?
            .into_iter()
            .map(|t| t.iter().sum())
            .collect())
    }

    /// Per-token log-probabilities of each continuation, computed in packed
    /// passes of at most [`PACK_CHUNK`] sequences.
    pub fn token_logprobs(&self, continuations: &[&TokenSeq]) -> Result<Vec<Vec<f64>>> {
        for c in continuations {
            check_len(&self.view, self.len() + c.len())?;
        }
        let first = self
            .view
            .log_softmax_rows(self.last_hidden.view().insert_axis(Axis(0)));
        let mut out = Vec::with_capacity(continuations.len());
        for chunk in continuations.chunks(PACK_CHUNK) {
            self.token_logprobs_packed(chunk, &first, &mut out)?;
        }
        Ok(out)
    }

    fn token_logprobs_packed(&self, continuations: &[&TokenSeq], first: &Array2<f64>, out: &mut Vec<Vec<f64>>) -> Result<()> {
        // Token i>0 of each continuation is predicted from the hidden state at
        // token i-1; the last token never needs a forward position.
        let seqs: Vec<Vec<Item>> = continuations
            .iter()
            .map(|c| {
                let n = c.len().saturating_sub(1);
                c.ids()[..n].iter().map(|&t| Item::Token(t)).collect()
            })
            .collect();
        let pass = if seqs.iter().any(|s| !s.is_empty()) {
            Some(forward(&self.view, &seqs, Some(&self.kv), false, false)?)
        } else {
            None
        };
        let logp_rest = pass.as_ref().map(|p| self.view.log_softmax_rows(p.hidden.view()));
        for (ci, c) in continuations.iter().enumerate() {
            let ids = c.ids();
            let mut toks = Vec::with_capacity(ids.len());
            if let Some(&y0) = ids.first() {
                toks.push(first[[0, y0 as usize]]);
            }
            if let (Some(p), Some(lp)) = (&pass, &logp_rest) {
                let lo = p.offsets[ci];
                for (i, &y) in ids.iter().enumerate().skip(1) {
                    toks.push(lp[[lo + i - 1, y as usize]]);
                }
            }
            out.push(toks);
        }
        Ok(())
    }
}
