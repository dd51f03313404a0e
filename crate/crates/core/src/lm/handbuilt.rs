//! LMs with hand-set weights whose conditional distributions are known in
//! closed form. They serve as oracles: a bigram LM's log-probabilities can be
//! read straight off its table.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::LmConfig;
use super::params::LmParams;
use super::vocab::{TokenId, Vocab};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Next-token table: `rows[prev][next] = P(next | prev)`. Every row must be
/// a strictly positive distribution over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramTable {
    rows: Vec<Vec<f64>>,
}

impl BigramTable {
    /// Uniform rows everywhere.
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / vocab_size as f64; vocab_size]; vocab_size],
        }
    }

    /// Sets `P(next | prev)` for the listed tokens and spreads the remaining
    /// mass uniformly over the other tokens of the row.
    pub fn set_row(&mut self, prev: TokenId, entries: &[(TokenId, f64)]) -> Result<()> {
        let v = self.rows.len();
        let fixed: f64 = entries.iter().map(|(_, p)| p).sum();
        let free = v - entries.len();
        if fixed >= 1.0 || free == 0 || entries.iter().any(|(_, p)| *p <= 0.0) {
            return Err(Error::Config(format!(
                "row for token {prev} must leave positive mass for unlisted tokens"
            )));
        }
        let rest = (1.0 - fixed) / free as f64;
        let row = &mut self.rows[prev as usize];
        row.iter_mut().for_each(|p| *p = rest);
        for &(t, p) in entries {
            row[t as usize] = p;
        }
        Ok(())
    }

    pub fn prob(&self, prev: TokenId, next: TokenId) -> f64 {
        self.rows[prev as usize][next as usize]
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }
}

fn zero_body(params: &mut LmParams) {
    params.positional.fill(0.0);
    for l in &mut params.layers {
        l.w_out.fill(0.0);
        l.b_out.fill(0.0);
        l.w_proj.fill(0.0);
        l.b_proj.fill(0.0);
    }
}

/// A transformer whose next-token distribution depends only on the current
/// token and equals the table row. Attention and MLP outputs are zeroed;
/// each token embedding is a ±s pair on its own two dimensions, which the
/// final layer norm passes through up to a known scale, and the untied head
/// reads the log-table off those dimensions.
pub fn bigram_lm(table: &BigramTable, layers: usize, heads: usize, max_seq_len: usize) -> Result<LmParams> {
    let v = table.vocab_size();
    let mut h = 2 * v;
    while h % heads != 0 {
        h += 2;
    }
    let config = LmConfig {
        layers,
        heads,
        model_dim: h,
        max_seq_len,
        vocab_size: v,
        seed: 0,
    };
    let mut params = LmParams::init(&config)?;
    zero_body(&mut params);
    // mean 0, variance 2 s^2 / h = 1 so the final norm only divides by
    // sqrt(1 + eps)
    let s = (h as f64 / 2.0).sqrt();
    let post_norm = s / (1.0 + LN_EPS).sqrt();
    params.embedding.fill(0.0);
    for t in 0..v {
        params.embedding[[t, 2 * t]] = s;
        params.embedding[[t, 2 * t + 1]] = -s;
    }
    params.lnf_gain.fill(1.0);
    params.lnf_bias.fill(0.0);
    let mut head = Array2::zeros((v, h));
    for prev in 0..v {
        for next in 0..v {
            head[[next, 2 * prev]] = table.rows[prev][next].ln() / post_norm;
        }
    }
    params.untie();
    *params.head_mut().expect("untied") = head;
    Ok(params)
}

/// An LM whose every next-token distribution is uniform over the non-reserved
/// tokens of `vocab`; reserved tokens get probability (numerically) zero.
pub fn uniform_lm(vocab: &Vocab, layers: usize, heads: usize, model_dim: usize, max_seq_len: usize) -> Result<LmParams> {
    let config = LmConfig {
        layers,
        heads,
        model_dim,
        max_seq_len,
        vocab_size: vocab.len(),
        seed: 1,
    };
    let mut params = LmParams::init(&config)?;
    // zero gain makes the final hidden state the constant bias vector
    params.lnf_gain.fill(0.0);
    params.lnf_bias.fill(0.0);
    params.lnf_bias[0] = 1.0;
    let mut head = Array2::zeros((vocab.len(), model_dim));
    for t in 0..vocab.len() as TokenId {
        if vocab.is_reserved(t) {
            head[[t as usize, 0]] = -1e4;
        }
    }
    params.untie();
    *params.head_mut().expect("untied") = head;
    Ok(params)
}

/// Seeded initialization with every tensor perturbed by normal(0, `std`)
/// noise, so attention, norms and activations are far from their init
/// regime. Used for gradient checks.
pub fn random_lm(config: &LmConfig, std: f64) -> Result<LmParams> {
    let mut params = LmParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{conditional_logprob, LmView, TokenSeq};

    #[test]
    fn bigram_logprob_reads_table() {
        let mut t = BigramTable::uniform(6);
        t.set_row(1, &[(4, 0.3)]).unwrap();
        t.set_row(4, &[(5, 0.6)]).unwrap();
        let p = bigram_lm(&t, 1, 2, 8).unwrap();
        let view = LmView::base(&p);
        let lp = conditional_logprob(&view, 1, &TokenSeq::new(), &TokenSeq(vec![4, 5])).unwrap();
        assert!((lp - (0.3f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_overfull_row() {
        let mut t = BigramTable::uniform(4);
        assert!(t.set_row(0, &[(1, 0.7), (2, 0.3)]).is_err());
    }
}
