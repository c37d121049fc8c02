//! Temperature sampling and greedy decoding.
//!
//! Sample `i` of a batch with seed `s` reads its uniforms from ChaCha8
//! stream `i` of seed `s`, one draw per generated token, so a batch is
//! reproducible regardless of how its samples are scheduled. There is no
//! top-k or nucleus truncation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::rng;

/// Prompt plus generated tokens. Pads may only appear as trailing fill.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Whether generation stopped on eos.
    pub terminated: bool,
}

impl Sequence {
    pub fn new(tokens: Vec<usize>, prompt_len: usize, terminated: bool, pad: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Contract(format!(
                "prompt_len {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        if let Some(first) = tokens.iter().position(|&t| t == pad) {
            if first < prompt_len || tokens[first..].iter().any(|&t| t != pad) {
                return Err(Error::Contract("pad tokens may only appear as trailing fill".into()));
            }
        }
        Ok(Sequence { tokens, prompt_len, terminated })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// Zero-based positions `j ≥ prompt_len` with a non-pad token. The
    /// distribution over token `j` comes from the logits at position `j − 1`.
    pub fn target_positions(&self, pad: usize) -> Vec<usize> {
        (self.prompt_len.max(1)..self.tokens.len()).filter(|&j| self.tokens[j] != pad).collect()
    }

    /// This sequence with `n` pad tokens appended.
    pub fn padded(&self, n: usize, pad: usize) -> Sequence {
        let mut tokens = self.tokens.clone();
        tokens.extend(std::iter::repeat_n(pad, n));
        Sequence { tokens, prompt_len: self.prompt_len, terminated: self.terminated }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        GenConfig { temperature, max_new_tokens, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A generated sequence with the logits row behind each generated token.
#[derive(Clone, Debug)]
pub struct Generation {
    pub sequence: Sequence,
    /// `logits[i]` is the raw row that produced generated token `i`.
    pub logits: Vec<Vec<f64>>,
}

/// Index drawn from `softmax(logits / temperature)` using the uniform `u`.
pub fn sample_index(logits: &[f64], temperature: f64, u: f64) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let target = u * weights.iter().sum::<f64>();
    let mut cum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if target < cum {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

fn decode_with(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    max_new_tokens: usize,
    keep_logits: bool,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be non-empty".into()));
    }
    if max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be positive".into()));
    }
    let total = prompt.len() + max_new_tokens;
    if total > model.max_seq_len() {
        return Err(Error::Capacity { len: total, max: model.max_seq_len() });
    }
    let (eos, pad) = (model.eos_token(), model.pad_token());
    if prompt.contains(&pad) {
        return Err(Error::Contract("prompt contains the pad token".into()));
    }
    let mut session = model.session();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = session.feed(t)?;
    }
    let mut tokens = prompt.to_vec();
    let mut rows = Vec::new();
    let mut terminated = false;
    for step in 0..max_new_tokens {
        let next = choose(&logits);
        tokens.push(next);
        if keep_logits {
            rows.push(std::mem::take(&mut logits));
        }
        if next == eos {
            terminated = true;
            break;
        }
        if next == pad {
            break;
        }
        if step + 1 < max_new_tokens {
            logits = session.feed(next)?;
        }
    }
    let sequence = Sequence::new(tokens, prompt.len(), terminated, pad)?;
    Ok(Generation { sequence, logits: rows })
}

/// Sample stream `stream` of `gen.seed`, keeping the logits rows.
pub fn sample_stream(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    gen: &GenConfig,
    stream: u64,
) -> Result<Generation> {
    gen.validate()?;
    let mut rng = rng::stream(gen.seed, stream);
    decode_with(model, prompt, gen.max_new_tokens, true, |z| {
        sample_index(z, gen.temperature, rng.random::<f64>())
    })
}

/// One sequence drawn from `softmax(z / temperature)` at each step, stopping
/// at eos or `max_new_tokens`.
pub fn sample(model: &(impl LanguageModel + ?Sized), prompt: &[usize], gen: &GenConfig) -> Result<Sequence> {
    Ok(sample_stream(model, prompt, gen, 0)?.sequence)
}

/// `k` independent samples; sample `i` uses stream `i`.
pub fn sample_batch_with_logits(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    k: usize,
    gen: &GenConfig,
) -> Result<Vec<Generation>> {
    if k == 0 {
        return Err(Error::Contract("sample_batch needs k >= 1".into()));
    }
    gen.validate()?;
    (0..k as u64).into_par_iter().map(|i| sample_stream(model, prompt, gen, i)).collect()
}

pub fn sample_batch(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    k: usize,
    gen: &GenConfig,
) -> Result<Vec<Sequence>> {
    Ok(sample_batch_with_logits(model, prompt, k, gen)?.into_iter().map(|g| g.sequence).collect())
}

/// Greedy decoding: the argmax token at every step, lowest id on ties.
pub fn greedy_decode(
    model: &(impl LanguageModel + ?Sized),
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Sequence> {
    Ok(decode_with(model, prompt, max_new_tokens, false, argmax)?.sequence)
}
