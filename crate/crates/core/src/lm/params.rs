//! Weights of the toy causal LM.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::LmConfig;
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Fused query/key/value projection, `h × 3h`.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

/// All weights of the LM. The output head is either tied to the token
/// embedding (`head == None`) or an independent `|V| × h` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub config: LmConfig,
    pub embedding: Array2<f64>,
    pub positional: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    head: Option<Array2<f64>>,
}

impl LayerParams {
    fn zeros(h: usize, mlp: usize) -> Self {
        Self {
            ln1_gain: Array1::zeros(h),
            ln1_bias: Array1::zeros(h),
            w_qkv: Array2::zeros((h, 3 * h)),
            b_qkv: Array1::zeros(3 * h),
            w_out: Array2::zeros((h, h)),
            b_out: Array1::zeros(h),
            ln2_gain: Array1::zeros(h),
            ln2_bias: Array1::zeros(h),
            w_fc: Array2::zeros((h, mlp)),
            b_fc: Array1::zeros(mlp),
            w_proj: Array2::zeros((mlp, h)),
            b_proj: Array1::zeros(h),
        }
    }

    fn tensors(&self) -> [&[f64]; 12] {
        [
            slice1(&self.ln1_gain),
            slice1(&self.ln1_bias),
            slice2(&self.w_qkv),
            slice1(&self.b_qkv),
            slice2(&self.w_out),
            slice1(&self.b_out),
            slice1(&self.ln2_gain),
            slice1(&self.ln2_bias),
            slice2(&self.w_fc),
            slice1(&self.b_fc),
            slice2(&self.w_proj),
            slice1(&self.b_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.ln1_gain.as_slice_mut().unwrap(),
            self.ln1_bias.as_slice_mut().unwrap(),
            self.w_qkv.as_slice_mut().unwrap(),
            self.b_qkv.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
            self.ln2_gain.as_slice_mut().unwrap(),
            self.ln2_bias.as_slice_mut().unwrap(),
            self.w_fc.as_slice_mut().unwrap(),
            self.b_fc.as_slice_mut().unwrap(),
            self.w_proj.as_slice_mut().unwrap(),
            self.b_proj.as_slice_mut().unwrap(),
        ]
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

impl LmParams {
    /// Seeded initialization: normal(0, 0.02) weights, zero biases, unit
    /// layer-norm gains, tied head.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let h = config.model_dim;
        let mlp = config.mlp_dim();
        let embedding = draw(config.vocab_size, h);
        let positional = draw(config.max_seq_len, h);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut l = LayerParams::zeros(h, mlp);
            l.ln1_gain.fill(1.0);
            l.ln2_gain.fill(1.0);
            l.w_qkv = draw(h, 3 * h);
            l.w_out = draw(h, h);
            l.w_fc = draw(h, mlp);
            l.w_proj = draw(mlp, h);
            layers.push(l);
        }
        Ok(Self {
            config: config.clone(),
            embedding,
            positional,
            layers,
            lnf_gain: Array1::ones(h),
            lnf_bias: Array1::zeros(h),
            head: None,
        })
    }

    /// All-zero parameter set with the same shapes and tying as `self`; used
    /// as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let h = c.model_dim;
        Self {
            config: c.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            positional: Array2::zeros(self.positional.raw_dim()),
            layers: (0..self.layers.len())
                .map(|_| LayerParams::zeros(h, c.mlp_dim()))
                .collect(),
            lnf_gain: Array1::zeros(h),
            lnf_bias: Array1::zeros(h),
            head: self.head.as_ref().map(|o| Array2::zeros(o.raw_dim())),
        }
    }

    pub fn is_tied(&self) -> bool {
        self.head.is_none()
    }

    /// The output projection `O`, which is the embedding when tied.
    pub fn head(&self) -> &Array2<f64> {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    pub fn head_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.head.as_mut()
    }

    /// Separates the head from the embedding; the new head starts as a copy.
    pub fn untie(&mut self) {
        if self.head.is_none() {
            self.head = Some(self.embedding.clone());
        }
    }

    /// Flat views over every tensor in a fixed order. The head appears last
    /// and only when untied.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![
            ("embedding".to_string(), slice2(&self.embedding)),
            ("positional".to_string(), slice2(&self.positional)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(l.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".to_string(), slice1(&self.lnf_gain)));
        out.push(("lnf_bias".to_string(), slice1(&self.lnf_bias)));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), slice2(h)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.embedding.as_slice_mut().unwrap(),
            self.positional.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(self.lnf_gain.as_slice_mut().unwrap());
        out.push(self.lnf_bias.as_slice_mut().unwrap());
        if let Some(h) = &mut self.head {
            out.push(h.as_slice_mut().unwrap());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over the bit patterns of one named tensor.
    pub fn tensor_hash(&self, name: &str) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| hash_f64s(t))
    }

    /// Per-tensor hashes, in [`LmParams::tensors`] order.
    pub fn tensor_hashes(&self) -> Vec<(String, String)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, hash_f64s(t)))
            .collect()
    }
}

pub const LAYER_TENSOR_NAMES: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_qkv", "b_qkv", "w_out", "b_out", "ln2_gain", "ln2_bias", "w_fc",
    "b_fc", "w_proj", "b_proj",
];

pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LmConfig {
        LmConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            max_seq_len: 16,
            vocab_size: 11,
            seed: 7,
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = LmParams::init(&small()).unwrap();
        let b = LmParams::init(&small()).unwrap();
        assert_eq!(a, b);
        let mut c = small();
        c.seed = 8;
        assert_ne!(a, LmParams::init(&c).unwrap());
    }

    #[test]
    fn untie_copies_then_separates() {
        let mut p = LmParams::init(&small()).unwrap();
        assert!(p.is_tied());
        p.untie();
        assert!(!p.is_tied());
        assert_eq!(p.head(), &p.embedding);
        let emb_hash = p.tensor_hash("embedding").unwrap();
        p.head_mut().unwrap()[[3, 2]] += 1.0;
        assert_eq!(p.tensor_hash("embedding").unwrap(), emb_hash);
        let head_hash = p.tensor_hash("head").unwrap();
        p.embedding[[0, 0]] -= 1.0;
        assert_eq!(p.tensor_hash("head").unwrap(), head_hash);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = small();
        c.heads = 3;
        assert!(LmParams::init(&c).is_err());
    }

    #[test]
    fn tensor_listing_matches_mut_listing() {
        let mut p = LmParams::init(&small()).unwrap();
        p.untie();
        let lens: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
        let lens_mut: Vec<usize> = p.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
    }
}
