use super::{ModelConfig, Weights, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Teacher-forced forward pass. `tokens` is a row-major `[batch, seq_len]`
/// id matrix; the result is logits `[batch, seq_len, vocab]`, where position
/// `t` depends only on tokens `0..=t`.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    w: &Weights<Var>,
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
) -> Result<Var> {
    if batch == 0 || seq_len == 0 || tokens.len() != batch * seq_len {
        return Err(Error::Shape(format!(
            "{} tokens for batch {batch} x length {seq_len}",
            tokens.len()
        )));
    }
    if seq_len > config.max_seq_len {
        return Err(Error::Capacity { len: seq_len, max: config.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Vocab { token: bad, vocab: config.vocab_size });
    }

    let d = config.d_model;
    let heads = config.n_heads;
    let dh = config.head_dim();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();

    let tok = tape.embedding(w.tok_emb, tokens, &[batch, seq_len])?;
    let pos = tape.embedding(w.pos_emb, &positions, &[batch, seq_len])?;
    let mut x = tape.add(tok, pos)?;

    let split = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[batch, seq_len, heads, dh])?;
        let v = tape.swap_axes12(v)?;
        tape.reshape(v, &[batch * heads, seq_len, dh])
    };

    for layer in &w.layers {
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
        let q = tape.matmul(h, layer.wq)?;
        let q = tape.add_bias(q, layer.bq)?;
        let k = tape.matmul(h, layer.wk)?;
        let k = tape.add_bias(k, layer.bk)?;
        let v = tape.matmul(h, layer.wv)?;
        let v = tape.add_bias(v, layer.bv)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.causal_softmax(scores)?;
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, heads, seq_len, dh])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[batch, seq_len, d])?;
        let proj = tape.matmul(ctx, layer.wo)?;
        let proj = tape.add_bias(proj, layer.bo)?;
        x = tape.add(x, proj)?;

        let h = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
        let up = tape.matmul(h, layer.w1)?;
        let up = tape.add_bias(up, layer.b1)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, layer.w2)?;
        let down = tape.add_bias(down, layer.b2)?;
        x = tape.add(x, down)?;
    }

    let x = tape.layer_norm(x, w.lnf_gain, w.lnf_bias, LAYER_NORM_EPS)?;
    tape.matmul(x, w.out_proj)
}
