//! The entropy-minimisation objective.
//!
//! For a sequence with prompt length `P`, the target set is every position
//! after the prompt that holds a non-pad token. The loss of one sequence is
//! the mean over that set of the entropy of the model's next-token
//! distribution, and the loss of a batch is the mean of per-sequence losses.
//! Sampled tokens are treated as fixed data: gradients reach the parameters
//! through the teacher-forced logits only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{sample_batch_with_logits, GenConfig, Generation, Sequence};
use crate::model::{forward, LanguageModel, ModelConfig, ModelParams, Weights};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// How per-position entropies are averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean within each sequence, then mean over sequences.
    #[default]
    PerSequence,
    /// One mean over all target positions of the batch.
    Pooled,
}

/// Entropy of `softmax(logits)`, in nats.
pub fn token_entropy(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Shape("entropy of an empty logits row".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(kernels::entropy_of_logits(logits))
}

/// Target positions of every sequence in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyMask {
    pub positions: Vec<Vec<usize>>,
}

impl EntropyMask {
    pub fn new(batch: &[Sequence], pad: usize) -> Self {
        EntropyMask { positions: batch.iter().map(|s| s.target_positions(pad)).collect() }
    }
}

/// Row selection and weights that turn `[B, T, V]` logits into the loss.
struct LossPlan {
    rows: Vec<usize>,
    weights: Vec<f64>,
}

impl LossPlan {
    fn new(mask: &EntropyMask, seq_len: usize, averaging: Averaging) -> Result<Self> {
        let valid: Vec<usize> = (0..mask.positions.len()).filter(|&b| !mask.positions[b].is_empty()).collect();
        if valid.is_empty() {
            return Err(Error::Degenerate("no sequence in the batch has a generated non-pad token".into()));
        }
        if valid.len() < mask.positions.len() {
            log::warn!(
                "excluding {} of {} sequences with no generated tokens from the entropy loss",
                mask.positions.len() - valid.len(),
                mask.positions.len()
            );
        }
        let total: usize = valid.iter().map(|&b| mask.positions[b].len()).sum();
        let mut rows = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for &b in &valid {
            let positions = &mask.positions[b];
            let w = match averaging {
                Averaging::PerSequence => 1.0 / (positions.len() as f64 * valid.len() as f64),
                Averaging::Pooled => 1.0 / total as f64,
            };
            for &j in positions {
                if j > seq_len {
                    return Err(Error::Shape(format!("target position {j} beyond logits length {seq_len}")));
                }
                rows.push(b * seq_len + j - 1);
                weights.push(w);
            }
        }
        Ok(LossPlan { rows, weights })
    }
}

/// Entropy loss on precomputed logits `[B, T, V]` that were produced by
/// teacher forcing `batch` (row `b`, position `t` predicts token `t + 1`).
pub fn em_loss_from_logits(
    tape: &mut Tape,
    logits: Var,
    batch: &[Sequence],
    pad: usize,
    averaging: Averaging,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != batch.len() {
        return Err(Error::Shape(format!("logits {shape:?} for a batch of {}", batch.len())));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    let plan = LossPlan::new(&EntropyMask::new(batch, pad), t, averaging)?;
    let flat = tape.reshape(logits, &[b * t, v])?;
    let picked = tape.gather_rows(flat, &plan.rows)?;
    let entropy = tape.row_entropy(picked)?;
    let n = plan.weights.len();
    let weights = tape.constant(Tensor::new(vec![n], plan.weights)?);
    let weighted = tape.mul(entropy, weights)?;
    Ok(tape.sum(weighted))
}

/// Pad `batch` to a common length and lay it out row-major, dropping the
/// final position (its logits predict nothing in the batch).
pub fn teacher_forcing_tokens(batch: &[Sequence], pad: usize) -> Result<(Vec<usize>, usize)> {
    let longest = batch.iter().map(Sequence::len).max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::Degenerate("sequences too short to carry a generated token".into()));
    }
    let seq_len = longest - 1;
    let mut tokens = Vec::with_capacity(batch.len() * seq_len);
    for s in batch {
        let take = s.len().min(seq_len);
        tokens.extend_from_slice(&s.tokens[..take]);
        tokens.extend(std::iter::repeat_n(pad, seq_len - take));
    }
    Ok((tokens, seq_len))
}

/// Differentiable entropy loss of `batch` under the weights `w` on `tape`.
pub fn em_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    w: &Weights<Var>,
    batch: &[Sequence],
    averaging: Averaging,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("em_loss needs a non-empty batch".into()));
    }
    let (tokens, seq_len) = teacher_forcing_tokens(batch, config.pad_token)?;
    let logits = forward(tape, config, w, &tokens, batch.len(), seq_len)?;
    em_loss_from_logits(tape, logits, batch, config.pad_token, averaging)
}

/// Value of [`em_loss`] without gradient bookkeeping.
pub fn em_loss_value(params: &ModelParams, batch: &[Sequence], averaging: Averaging) -> Result<f64> {
    let mut tape = Tape::new();
    let w = params.register_constant(&mut tape);
    let loss = em_loss(&mut tape, &params.config, &w, batch, averaging)?;
    tape.value(loss).item()
}

/// Sample `k` continuations of `prompt` and return the mean per-token
/// entropy over all their target positions. Measurement only.
pub fn mean_generation_entropy(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    k: usize,
    gen: &GenConfig,
) -> Result<f64> {
    generated_entropy(&sample_batch_with_logits(model, prompt, k, gen)?, model.pad_token())
}

/// Mean entropy of the logits rows behind every generated non-pad token.
pub fn generated_entropy(generations: &[Generation], pad: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in generations {
        for (row, &token) in g.logits.iter().zip(g.sequence.generated()) {
            if token != pad {
                total += token_entropy(row)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no generated non-pad tokens to measure".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((token_entropy(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(token_entropy(&[50.0, 0.0, 0.0, 0.0]).unwrap() < 1e-15);
        // p = [2/3, 1/3]
        let want = 3f64.ln() - (2.0 / 3.0) * 2f64.ln();
        assert!((token_entropy(&[2f64.ln(), 0.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.636514).abs() < 1e-6);
        assert!(matches!(token_entropy(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
    }

    fn seq(tokens: &[usize], prompt_len: usize) -> Sequence {
        Sequence::new(tokens.to_vec(), prompt_len, false, 0).unwrap()
    }

    #[test]
    fn uniform_generated_region_gives_ln_v() {
        let batch = vec![seq(&[2, 3, 4, 5], 2), seq(&[2, 3, 6], 2)];
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3, 4]));
        let loss = em_loss_from_logits(&mut tape, logits, &batch, 0, Averaging::PerSequence).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_sets() {
        let only_prompt = seq(&[2, 3], 2);
        let ok = seq(&[2, 3, 4], 2);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 2, 4]));
        assert!(em_loss_from_logits(&mut tape, logits, &[only_prompt.clone(), ok], 0, Averaging::PerSequence).is_ok());
        let logits = tape.constant(Tensor::zeros(vec![1, 2, 4]));
        let err = em_loss_from_logits(&mut tape, logits, &[only_prompt], 0, Averaging::PerSequence);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn pooled_weights_positions_equally() {
        // seq a: entropies pinned by rows; one target with peaked logits,
        // seq b: three targets with uniform logits.
        let batch = vec![seq(&[2, 3], 1), seq(&[2, 3, 4, 5], 1)];
        let mut data = vec![0.0; 2 * 3 * 4];
        data[0] = 60.0; // row (0, 0) is one-hot -> entropy ~0
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2, 3, 4], data).unwrap());
        let per_seq = em_loss_from_logits(&mut tape, logits, &batch, 0, Averaging::PerSequence).unwrap();
        let pooled = em_loss_from_logits(&mut tape, logits, &batch, 0, Averaging::Pooled).unwrap();
        let ln4 = 4f64.ln();
        assert!((tape.value(per_seq).item().unwrap() - ln4 / 2.0).abs() < 1e-12);
        assert!((tape.value(pooled).item().unwrap() - 0.75 * ln4).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_layout() {
        let batch = vec![seq(&[2, 3, 4, 5], 2), seq(&[2, 3, 6], 2)];
        let (tokens, len) = teacher_forcing_tokens(&batch, 0).unwrap();
        assert_eq!(len, 3);
        assert_eq!(tokens, vec![2, 3, 4, 2, 3, 6]);
    }
}
