#![allow(dead_code)]

use emlab::tensor::Tensor;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random values in `[-scale, scale]`.
pub fn noise(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), noise(n, seed, scale)).unwrap()
}

use std::collections::HashMap;

use emlab::model::{DecodeSession, LanguageModel};
use emlab::tasks::{TaskInstance, Tokenizer, EOS, PAD};
use emlab::Result;

/// Hand-built model: `next(prefix)` gives the logits after `prefix`.
pub struct StubModel<F> {
    pub vocab: usize,
    pub max_len: usize,
    pub next: F,
}

struct StubSession<'a, F> {
    model: &'a StubModel<F>,
    prefix: Vec<usize>,
}

impl<F: Fn(&[usize]) -> Vec<f64> + Sync> LanguageModel for StubModel<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_seq_len(&self) -> usize {
        self.max_len
    }
    fn pad_token(&self) -> usize {
        PAD
    }
    fn eos_token(&self) -> usize {
        EOS
    }
    fn session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(StubSession { model: self, prefix: Vec::new() })
    }
}

impl<F: Fn(&[usize]) -> Vec<f64> + Sync> DecodeSession for StubSession<'_, F> {
    fn feed(&mut self, token: usize) -> Result<Vec<f64>> {
        self.prefix.push(token);
        Ok((self.model.next)(&self.prefix))
    }
}

pub const STUB_VOCAB: usize = 32;

pub fn one_hot(token: usize) -> Vec<f64> {
    let mut z = vec![-60.0; STUB_VOCAB];
    z[token] = 60.0;
    z
}

/// Emits the canonical answer and eos for every instance of `pool`.
pub fn perfect_model(pool: &[TaskInstance]) -> StubModel<impl Fn(&[usize]) -> Vec<f64> + Sync> {
    let tok = Tokenizer::new();
    let solved: HashMap<Vec<usize>, Vec<usize>> =
        pool.iter().map(|t| (t.prompt_tokens.clone(), t.solved_tokens(&tok))).collect();
    StubModel {
        vocab: STUB_VOCAB,
        max_len: 64,
        next: move |prefix: &[usize]| {
            match (1..=prefix.len()).rev().find_map(|n| solved.get(&prefix[..n])) {
                Some(full) => one_hot(full.get(prefix.len()).copied().unwrap_or(EOS)),
                None => vec![0.0; STUB_VOCAB],
            }
        },
    }
}

/// Puts all mass on the pad token.
pub fn pad_model() -> StubModel<impl Fn(&[usize]) -> Vec<f64> + Sync> {
    StubModel { vocab: STUB_VOCAB, max_len: 64, next: |_: &[usize]| one_hot(PAD) }
}

/// For prompt `i` of `pool`, answers correctly with probability `probs[i]`
/// at temperature 1 and otherwise emits a wrong single character.
pub fn rigged_model(pool: &[TaskInstance], probs: &[f64]) -> StubModel<impl Fn(&[usize]) -> Vec<f64> + Sync> {
    let tok = Tokenizer::new();
    let table: HashMap<Vec<usize>, (usize, usize, f64)> = pool
        .iter()
        .zip(probs)
        .map(|(t, &p)| {
            let right = tok.encode(&t.answer).unwrap();
            assert_eq!(right.len(), 1, "rigged prompts need single-character answers");
            let wrong = tok.encode("+").unwrap()[0];
            (t.prompt_tokens.clone(), (right[0], wrong, p))
        })
        .collect();
    StubModel {
        vocab: STUB_VOCAB,
        max_len: 64,
        next: move |prefix: &[usize]| match table.get(prefix) {
            Some(&(right, wrong, p)) => {
                let mut z = vec![-60.0; STUB_VOCAB];
                z[right] = p.ln();
                z[wrong] = (1.0 - p).ln();
                z
            }
            None => one_hot(EOS),
        },
    }
}

/// Pearson chi-square p-value of `counts` against `probs`, pooling cells
/// whose expected count is below 5 into one.
pub fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let mut cells = Vec::new();
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * n as f64;
        if e < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += e;
        } else {
            cells.push((c as f64, e));
        }
    }
    if pooled_exp > 0.0 {
        cells.push((pooled_obs, pooled_exp));
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (cells.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}
