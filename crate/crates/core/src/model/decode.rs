use super::{ModelParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::kernels::{dot, gelu, gemm_nn, layer_norm_row, softmax_in_place};

/// Anything that can be decoded one token at a time.
///
/// Generation, selection and evaluation are written against this trait so
/// they run unchanged on hand-built stub models.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn pad_token(&self) -> usize;
    fn eos_token(&self) -> usize;
    fn session(&self) -> Box<dyn DecodeSession + '_>;
}

/// Incremental decoding state.
pub trait DecodeSession {
    /// Append `token` at the next position and return the logits predicting
    /// the token after it.
    fn feed(&mut self, token: usize) -> Result<Vec<f64>>;
}

impl LanguageModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn pad_token(&self) -> usize {
        self.config.pad_token
    }

    fn eos_token(&self) -> usize {
        self.config.eos_token
    }

    fn session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(KvSession::new(self))
    }
}

/// Decoder that caches per-layer keys and values so each step costs one
/// position of compute.
struct KvSession<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> KvSession<'a> {
    fn new(params: &'a ModelParams) -> Self {
        let n = params.config.n_layers;
        let cap = params.config.max_seq_len * params.config.d_model;
        KvSession {
            params,
            keys: (0..n).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..n).map(|_| Vec::with_capacity(cap)).collect(),
            pos: 0,
        }
    }
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    gemm_nn(x, w, &mut out, 1, x.len(), n);
    if let Some(b) = b {
        for (o, bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

impl DecodeSession for KvSession<'_> {
    fn feed(&mut self, token: usize) -> Result<Vec<f64>> {
        let c = &self.params.config;
        let w = &self.params.weights;
        if self.pos >= c.max_seq_len {
            return Err(Error::Capacity { len: self.pos + 1, max: c.max_seq_len });
        }
        if token >= c.vocab_size {
            return Err(Error::Vocab { token, vocab: c.vocab_size });
        }
        let (d, dh, heads) = (c.d_model, c.head_dim(), c.n_heads);
        let hidden = c.mlp_hidden();
        let t = self.pos;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = &w.tok_emb.data()[token * d..(token + 1) * d];
        let pos = &w.pos_emb.data()[t * d..(t + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];

        for (l, layer) in w.layers.iter().enumerate() {
            layer_norm_row(&x, layer.ln1_gain.data(), layer.ln1_bias.data(), LAYER_NORM_EPS, &mut h);
            let q = affine(&h, layer.wq.data(), Some(layer.bq.data()), d);
            let k = affine(&h, layer.wk.data(), Some(layer.bk.data()), d);
            let v = affine(&h, layer.wv.data(), Some(layer.bv.data()), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];

            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for head in 0..heads {
                let off = head * dh;
                let qh = &q[off..off + dh];
                for (s, score) in scores.iter_mut().enumerate() {
                    *score = dot(qh, &keys[s * d + off..s * d + off + dh]) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut ctx[off..off + dh];
                for (s, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&values[s * d + off..s * d + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
            let proj = affine(&ctx, layer.wo.data(), Some(layer.bo.data()), d);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }

            layer_norm_row(&x, layer.ln2_gain.data(), layer.ln2_bias.data(), LAYER_NORM_EPS, &mut h);
            let mut up = affine(&h, layer.w1.data(), Some(layer.b1.data()), hidden);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            let down = affine(&up, layer.w2.data(), Some(layer.b2.data()), d);
            for (xi, m) in x.iter_mut().zip(&down) {
                *xi += m;
            }
        }
        layer_norm_row(&x, w.lnf_gain.data(), w.lnf_bias.data(), LAYER_NORM_EPS, &mut h);
        self.pos += 1;
        Ok(affine(&h, w.out_proj.data(), None, c.vocab_size))
    }
}
