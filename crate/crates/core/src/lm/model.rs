//! Packed-batch forward and reverse pass of the pre-norm decoder.
//!
//! Sequences are packed row-wise into one `N × h` activation matrix so the
//! dense projections run as single matrix products; attention runs per
//! sequence. An optional key/value state lets every packed sequence attend
//! to a shared, already-computed prefix.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::LmParams;
use super::vocab::{TokenId, TokenSeq};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// One input position: a vocabulary token or a row of the prompt matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Token(TokenId),
    Prompt(usize),
}

/// Base weights plus the optional overlays the tuning methods train.
///
/// Every evaluated sequence is `BOS, prompt rows…, text…`; logits are
/// `O·U·h` with `O` the overriding head when present.
#[derive(Debug, Clone, Copy)]
pub struct LmView<'a> {
    pub params: &'a LmParams,
    pub head: Option<&'a Array2<f64>>,
    pub transform: Option<&'a Array2<f64>>,
    pub prompts: Option<&'a Array2<f64>>,
}

impl<'a> LmView<'a> {
    pub fn base(params: &'a LmParams) -> Self {
        Self {
            params,
            head: None,
            transform: None,
            prompts: None,
        }
    }

    pub fn head_matrix(&self) -> &'a Array2<f64> {
        self.head.unwrap_or_else(|| self.params.head())
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.map_or(0, |p| p.nrows())
    }

    /// Items that precede any text: BOS and the prompt rows.
    pub fn lead(&self, bos: TokenId) -> Vec<Item> {
        let mut v = Vec::with_capacity(1 + self.n_prompts());
        v.push(Item::Token(bos));
        v.extend((0..self.n_prompts()).map(Item::Prompt));
        v
    }

    pub fn sequence(&self, bos: TokenId, parts: &[&TokenSeq]) -> Vec<Item> {
        let mut v = self.lead(bos);
        for p in parts {
            v.extend(p.ids().iter().map(|&t| Item::Token(t)));
        }
        v
    }

    /// Log-probabilities over the vocabulary for each row of final hidden
    /// states.
    pub fn log_softmax_rows(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.logits(hidden);
        for mut row in z.rows_mut() {
            let lse = log_sum_exp(row.as_slice().unwrap());
            row.mapv_inplace(|v| v - lse);
        }
        z
    }

    pub fn logits(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        let o = self.head_matrix();
        match self.transform {
            Some(u) => hidden.dot(&u.t()).dot(&o.t()),
            None => hidden.dot(&o.t()),
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Keys and values for an already-processed prefix, per layer.
#[derive(Debug, Clone)]
pub struct KvState {
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
}

impl KvState {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) struct LayerTrace {
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities, indexed `seq * heads + head`.
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    lnf: LnCache,
}

pub(crate) struct ForwardPass {
    /// Final layer-normed hidden states, one row per packed position.
    pub hidden: Array2<f64>,
    pub offsets: Vec<usize>,
    pub trace: Option<Trace>,
    /// Keys and values of the packed positions, per layer.
    pub kv: Option<KvState>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, h) = x.dim();
    let mut xhat = Array2::zeros((n, h));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, h) = dy.dim();
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros((n, h));
    for i in 0..n {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_d = dxh.sum() / h as f64;
        let mean_dx = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / h as f64;
        let r = cache.rstd[i];
        for j in 0..h {
            dx[[i, j]] = r * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn offsets_of(seqs: &[Vec<Item>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(seqs.len() + 1);
    offsets.push(0);
    for s in seqs {
        offsets.push(offsets.last().unwrap() + s.len());
    }
    offsets
}

/// Runs the decoder over packed sequences. Position numbering of every
/// sequence starts after the optional shared prefix state.
pub(crate) fn forward(
    view: &LmView,
    seqs: &[Vec<Item>],
    prefix: Option<&KvState>,
    record: bool,
    want_kv: bool,
) -> Result<ForwardPass> {
    let p = view.params;
    let cfg = &p.config;
    let h = cfg.model_dim;
    let heads = cfg.heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let base = prefix.map_or(0, |kv| kv.len());
    let offsets = offsets_of(seqs);
    let n = *offsets.last().unwrap();

    for s in seqs {
        if base + s.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: base + s.len(),
                max: cfg.max_seq_len,
                k: None,
            });
        }
    }

    let mut x = Array2::zeros((n, h));
    for (si, s) in seqs.iter().enumerate() {
        for (t, item) in s.iter().enumerate() {
            let row = offsets[si] + t;
            let src = match *item {
                Item::Token(id) => {
                    if id as usize >= cfg.vocab_size {
                        return Err(Error::Config(format!("token id {id} outside vocabulary")));
                    }
                    p.embedding.row(id as usize)
                }
                Item::Prompt(i) => match view.prompts {
                    Some(pr) if i < pr.nrows() => pr.row(i),
                    _ => return Err(Error::Config(format!("prompt row {i} not available"))),
                },
            };
            let mut dst = x.row_mut(row);
            dst.assign(&src);
            dst += &p.positional.row(base + t);
        }
    }

    let mut traces = Vec::new();
    let mut kv_keys = Vec::new();
    let mut kv_values = Vec::new();
    for (li, layer) in p.layers.iter().enumerate() {
        let (a1, ln1) = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
        let qkv = a1.dot(&layer.w_qkv) + &layer.b_qkv;
        let mut att = Array2::zeros((n, h));
        let mut probs = Vec::new();
        for si in 0..seqs.len() {
            let (lo, hi) = (offsets[si], offsets[si + 1]);
            let t_len = hi - lo;
            if t_len == 0 {
                if record {
                    probs.extend((0..heads).map(|_| Array2::zeros((0, 0))));
                }
                continue;
            }
            for hd in 0..heads {
                let q = qkv.slice(s![lo..hi, hd * d..(hd + 1) * d]);
                let k = qkv.slice(s![lo..hi, h + hd * d..h + (hd + 1) * d]);
                let v = qkv.slice(s![lo..hi, 2 * h + hd * d..2 * h + (hd + 1) * d]);
                let mut sc = q.dot(&k.t());
                sc.mapv_inplace(|z| z * scale);
                let mut sc_prefix = prefix.map(|kv| {
                    let kc = kv.keys[li].slice(s![.., hd * d..(hd + 1) * d]);
                    let mut m = q.dot(&kc.t());
                    m.mapv_inplace(|z| z * scale);
                    m
                });
                for t in 0..t_len {
                    let mut row: Vec<f64> = Vec::with_capacity(base + t + 1);
                    if let Some(sp) = &sc_prefix {
                        row.extend(sp.row(t).iter());
                    }
                    row.extend(sc.row(t).iter().take(t + 1));
                    softmax_in_place(&mut row);
                    if let Some(sp) = &mut sc_prefix {
                        for (o, v) in sp.row_mut(t).iter_mut().zip(&row[..base]) {
                            *o = *v;
                        }
                    }
                    let mut r = sc.row_mut(t);
                    for j in 0..t_len {
                        r[j] = if j <= t { row[base + j] } else { 0.0 };
                    }
                }
                let mut out = sc.dot(&v);
                if let (Some(sp), Some(kv)) = (&sc_prefix, prefix) {
                    let vc = kv.values[li].slice(s![.., hd * d..(hd + 1) * d]);
                    out += &sp.dot(&vc);
                }
                att.slice_mut(s![lo..hi, hd * d..(hd + 1) * d]).assign(&out);
                if record {
                    probs.push(sc);
                }
            }
        }
        if want_kv {
            kv_keys.push(qkv.slice(s![.., h..2 * h]).to_owned());
            kv_values.push(qkv.slice(s![.., 2 * h..3 * h]).to_owned());
        }
        let o = att.dot(&layer.w_out) + &layer.b_out;
        x += &o;
        let (a2, ln2) = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias);
        let pre_act = a2.dot(&layer.w_fc) + &layer.b_fc;
        let act = pre_act.mapv(gelu);
        let f = act.dot(&layer.w_proj) + &layer.b_proj;
        x += &f;
        if record {
            traces.push(LayerTrace {
                ln1,
                a1,
                qkv,
                probs,
                att,
                ln2,
                a2,
                pre_act,
                act,
            });
        }
    }
    let (hidden, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
    Ok(ForwardPass {
        hidden,
        offsets,
        trace: record.then_some(Trace {
            layers: traces,
            lnf,
        }),
        kv: want_kv.then_some(KvState {
            keys: kv_keys,
            values: kv_values,
        }),
    })
}

/// Gradients produced by [`backward`].
pub(crate) struct BodyGrads {
    /// Full parameter gradient (embedding, positional, layers, final norm),
    /// present when requested. The head slot is left for the caller.
    pub params: Option<LmParams>,
    pub prompts: Option<Array2<f64>>,
}

/// Reverse pass from a gradient on the final hidden states. Weight
/// gradients are only accumulated when `want_params`; prompt-row gradients
/// only when `want_prompts`. No shared prefix state is supported here.
pub(crate) fn backward(
    view: &LmView,
    seqs: &[Vec<Item>],
    pass: &ForwardPass,
    dhidden: Array2<f64>,
    want_params: bool,
    want_prompts: bool,
) -> BodyGrads {
    let p = view.params;
    let cfg = &p.config;
    let h = cfg.model_dim;
    let heads = cfg.heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let trace = pass.trace.as_ref().expect("forward pass was recorded");
    let offsets = &pass.offsets;
    let mut grads = want_params.then(|| p.zeros_like());

    let (mut dx, dg, db) = layer_norm_backward(&dhidden, &trace.lnf, &p.lnf_gain);
    if let Some(g) = &mut grads {
        g.lnf_gain = dg;
        g.lnf_bias = db;
    }

    for (li, layer) in p.layers.iter().enumerate().rev() {
        let tr = &trace.layers[li];
        // MLP branch
        let dact = dx.dot(&layer.w_proj.t());
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&tr.pre_act)
            .for_each(|g, &u| *g *= gelu_grad(u));
        let da2 = dpre.dot(&layer.w_fc.t());
        if let Some(g) = &mut grads {
            let gl = &mut g.layers[li];
            gl.w_proj = tr.act.t().dot(&dx);
            gl.b_proj = dx.sum_axis(Axis(0));
            gl.w_fc = tr.a2.t().dot(&dpre);
            gl.b_fc = dpre.sum_axis(Axis(0));
        }
        let (dx_ln2, dg2, db2) = layer_norm_backward(&da2, &tr.ln2, &layer.ln2_gain);
        dx += &dx_ln2;
        if let Some(g) = &mut grads {
            g.layers[li].ln2_gain = dg2;
            g.layers[li].ln2_bias = db2;
        }
        // attention branch
        let datt = dx.dot(&layer.w_out.t());
        if let Some(g) = &mut grads {
            g.layers[li].w_out = tr.att.t().dot(&dx);
            g.layers[li].b_out = dx.sum_axis(Axis(0));
        }
        let mut dqkv = Array2::<f64>::zeros(tr.qkv.raw_dim());
        for si in 0..seqs.len() {
            let (lo, hi) = (offsets[si], offsets[si + 1]);
            if hi == lo {
                continue;
            }
            for hd in 0..heads {
                let pm = &tr.probs[si * heads + hd];
                let q = tr.qkv.slice(s![lo..hi, hd * d..(hd + 1) * d]);
                let k = tr.qkv.slice(s![lo..hi, h + hd * d..h + (hd + 1) * d]);
                let v = tr.qkv.slice(s![lo..hi, 2 * h + hd * d..2 * h + (hd + 1) * d]);
                let dout = datt.slice(s![lo..hi, hd * d..(hd + 1) * d]);
                let dv = pm.t().dot(&dout);
                let dp = dout.dot(&v.t());
                let mut ds = Array2::zeros(pm.raw_dim());
                for t in 0..pm.nrows() {
                    let dot: f64 = (0..=t).map(|j| pm[[t, j]] * dp[[t, j]]).sum();
                    for j in 0..=t {
                        ds[[t, j]] = pm[[t, j]] * (dp[[t, j]] - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![lo..hi, hd * d..(hd + 1) * d]).assign(&dq);
                dqkv.slice_mut(s![lo..hi, h + hd * d..h + (hd + 1) * d]).assign(&dk);
                dqkv.slice_mut(s![lo..hi, 2 * h + hd * d..2 * h + (hd + 1) * d])
                    .assign(&dv);
            }
        }
        let da1 = dqkv.dot(&layer.w_qkv.t());
        if let Some(g) = &mut grads {
            g.layers[li].w_qkv = tr.a1.t().dot(&dqkv);
            g.layers[li].b_qkv = dqkv.sum_axis(Axis(0));
        }
        let (dx_ln1, dg1, db1) = layer_norm_backward(&da1, &tr.ln1, &layer.ln1_gain);
        dx += &dx_ln1;
        if let Some(g) = &mut grads {
            g.layers[li].ln1_gain = dg1;
            g.layers[li].ln1_bias = db1;
        }
    }

    let mut dprompts = if want_prompts {
        view.prompts.map(|pr| Array2::zeros(pr.raw_dim()))
    } else {
        None
    };
    for (si, s) in seqs.iter().enumerate() {
        for (t, item) in s.iter().enumerate() {
            let row = dx.row(offsets[si] + t);
            match *item {
                Item::Token(id) => {
                    if let Some(g) = &mut grads {
                        let mut e = g.embedding.row_mut(id as usize);
                        e += &row;
                    }
                }
                Item::Prompt(i) => {
                    if let Some(dp) = &mut dprompts {
                        let mut r = dp.row_mut(i);
                        r += &row;
                    }
                }
            }
            if let Some(g) = &mut grads {
                let mut pr = g.positional.row_mut(t);
                pr += &row;
            }
        }
    }
    BodyGrads {
        params: grads,
        prompts: dprompts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
