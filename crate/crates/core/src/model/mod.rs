//! A tiny decoder-only transformer.
//!
//! Pre-norm residual blocks with learned positional embeddings, multi-head
//! causal self-attention and a GELU MLP of width `4·d_model`. The output
//! projection has no bias and is not tied to the token embedding.

mod checkpoint;
mod decode;
mod forward;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{DecodeSession, LanguageModel};
pub use forward::forward;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub pad_token: usize,
    pub eos_token: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            pad_token: 0,
            eos_token: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pad_token == self.eos_token {
            return Err(Error::Config("pad_token and eos_token must differ".into()));
        }
        if self.pad_token >= self.vocab_size || self.eos_token >= self.vocab_size {
            return Err(Error::Config("pad_token and eos_token must be < vocab_size".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Number of scalar parameters:
    ///
    /// `V·d + L·d + n_layers·(12·d² + 13·d) + 2·d + d·V`
    ///
    /// where `L = max_seq_len`. Per layer that is two layer norms (`4d`),
    /// four `d×d` attention projections with biases (`4d² + 4d`), and the
    /// `d → 4d → d` MLP (`8d² + 5d`).
    pub fn param_count(&self) -> usize {
        let (v, d, l) = (self.vocab_size, self.d_model, self.max_seq_len);
        v * d + l * d + self.n_layers * (12 * d * d + 13 * d) + 2 * d + d * v
    }
}

/// Per-block parameters, generic over storage so the same layout serves
/// plain tensors, tape handles and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl<T> LayerWeights<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(LayerWeights {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

/// The full parameter set in canonical order: token embedding, positional
/// embedding, blocks, final layer norm, output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub out_proj: T,
}

impl<T> Weights<T> {
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let mut all = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            all.extend(layer.refs());
        }
        all.extend([&self.lnf_gain, &self.lnf_bias, &self.out_proj]);
        all.into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut all = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            all.extend(layer.refs_mut());
        }
        all.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.out_proj]);
        all.into_iter()
    }

    pub fn len(&self) -> usize {
        5 + 16 * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rebuild from values in canonical order.
    pub fn from_canonical(values: Vec<T>, n_layers: usize) -> Result<Self> {
        let expected = 5 + 16 * n_layers;
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} weight tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let tok_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let layers = (0..n_layers).map(|_| LayerWeights::from_iter(&mut it).unwrap()).collect();
        Ok(Weights {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: it.next().unwrap(),
            lnf_bias: it.next().unwrap(),
            out_proj: it.next().unwrap(),
        })
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Weights<U> {
        let values: Vec<U> = self.iter().map(f).collect();
        Weights::from_canonical(values, self.layers.len()).expect("same layout")
    }

    pub fn zip_with<U, R>(&self, other: &Weights<U>, mut f: impl FnMut(&T, &U) -> R) -> Weights<R> {
        let values: Vec<R> = self.iter().zip(other.iter()).map(|(a, b)| f(a, b)).collect();
        Weights::from_canonical(values, self.layers.len()).expect("same layout")
    }
}

/// Canonical tensor names, matching [`Weights::iter`] order.
pub fn weight_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for l in 0..n_layers {
        names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
    }
    names.extend(["ln_f.gain", "ln_f.bias", "out_proj"].map(String::from));
    names
}

pub fn weight_shapes(config: &ModelConfig) -> Weights<Vec<usize>> {
    let (v, d, h) = (config.vocab_size, config.d_model, config.mlp_hidden());
    let layer = LayerWeights {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        w1: vec![d, h],
        b1: vec![h],
        w2: vec![h, d],
        b2: vec![d],
    };
    Weights {
        tok_emb: vec![v, d],
        pos_emb: vec![config.max_seq_len, d],
        layers: vec![layer; config.n_layers],
        lnf_gain: vec![d],
        lnf_bias: vec![d],
        out_proj: vec![d, v],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    Gain,
    Bias,
    Normal,
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".gain") {
        InitKind::Gain
    } else if name.ends_with(".bias") || name.rsplit('.').next().is_some_and(|f| f.starts_with('b')) {
        InitKind::Bias
    } else {
        InitKind::Normal
    }
}

/// Parameters θ of the model, together with the configuration that fixes
/// their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    /// Deterministic initialisation: matrices from N(0, 0.02²), layer-norm
    /// gains 1, biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    /// Like [`ModelParams::init`] with a different standard deviation.
    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(seed, 0);
        let names = weight_names(config.n_layers);
        let shapes = weight_shapes(config);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .zip(&names)
            .map(|(shape, name)| {
                let n: usize = shape.iter().product();
                let data = match init_kind(name) {
                    InitKind::Gain => vec![1.0; n],
                    InitKind::Bias => vec![0.0; n],
                    InitKind::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            config: config.clone(),
            weights: Weights::from_canonical(tensors, config.n_layers)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        weight_names(self.config.n_layers).into_iter().zip(self.weights.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Tensor::is_finite)
    }

    /// Put every tensor on `tape` as a gradient-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|t| tape.param(t.clone()))
    }

    /// Put every tensor on `tape` as fixed data.
    pub fn register_constant(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|t| tape.constant(t.clone()))
    }

    /// Teacher-forced logits `[batch, seq_len, V]` without gradient tracking.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.register_constant(&mut tape);
        let out = forward(&mut tape, &self.config, &w, tokens, batch, seq_len)?;
        Ok(tape.value(out).clone())
    }
}
