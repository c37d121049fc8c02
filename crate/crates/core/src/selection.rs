//! Variance-based prompt selection.
//!
//! Each candidate prompt is sampled `k` times. With `c` correct samples,
//! `pass@k = c / k` and the population variance of the success indicator is
//! `pass@k · (1 − pass@k)`. The prompt with the largest variance, the one
//! the model is least consistent on, is selected.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generation::{sample_batch, GenConfig};
use crate::model::LanguageModel;
use crate::rng::derive_seed;
use crate::tasks::{is_correct, TaskInstance, Tokenizer};

pub const DEFAULT_K: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptStats {
    pub pool_index: usize,
    pub instance: TaskInstance,
    pub k: usize,
    pub pass_at_k: f64,
    pub variance: f64,
    pub per_sample_correct: Vec<bool>,
}

impl PromptStats {
    pub fn from_outcomes(pool_index: usize, instance: TaskInstance, outcomes: Vec<bool>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Contract("no samples to score".into()));
        }
        let k = outcomes.len();
        let pass = outcomes.iter().filter(|&&c| c).count() as f64 / k as f64;
        Ok(PromptStats {
            pool_index,
            instance,
            k,
            pass_at_k: pass,
            variance: pass * (1.0 - pass),
            per_sample_correct: outcomes,
        })
    }

    pub fn correct(&self) -> usize {
        self.per_sample_correct.iter().filter(|&&c| c).count()
    }

    /// `k² · variance`, exact in integers; used to rank prompts without
    /// rounding ties apart.
    fn spread(&self) -> usize {
        let c = self.correct();
        c * (self.k - c)
    }
}

/// Sample `k ≥ 2` continuations of `instance` and score them.
pub fn score_prompt(
    model: &(impl LanguageModel + ?Sized),
    pool_index: usize,
    instance: &TaskInstance,
    k: usize,
    gen: &GenConfig,
) -> Result<PromptStats> {
    if k < 2 {
        return Err(Error::Contract(format!("pass@k scoring needs k >= 2, got {k}")));
    }
    let tokenizer = Tokenizer::new();
    let outcomes = sample_batch(model, &instance.prompt_tokens, k, gen)?
        .iter()
        .map(|s| is_correct(instance, s, &tokenizer))
        .collect();
    PromptStats::from_outcomes(pool_index, instance.clone(), outcomes)
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub selected: usize,
    pub stats: Vec<PromptStats>,
    /// Every prompt scored zero variance; the pick carries no signal.
    pub zero_signal: bool,
}

impl Selection {
    pub fn instance(&self) -> &TaskInstance {
        &self.stats[self.selected].instance
    }
}

/// Pick the index with the largest variance, earliest on ties.
pub fn argmax_variance(stats: &[PromptStats]) -> Result<(usize, bool)> {
    let first = stats.first().ok_or_else(|| Error::Contract("cannot select from an empty pool".into()))?;
    let mut best = 0;
    let mut best_spread = first.spread();
    for (i, s) in stats.iter().enumerate().skip(1) {
        if s.spread() > best_spread {
            best = i;
            best_spread = s.spread();
        }
    }
    Ok((best, best_spread == 0))
}

/// Score every prompt of `pool` and select the most inconsistent one.
/// Prompt `i` samples with seed `derive_seed(gen.seed, i)`.
pub fn select_prompt(
    model: &(impl LanguageModel + ?Sized),
    pool: &[TaskInstance],
    k: usize,
    gen: &GenConfig,
) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::Contract("cannot select from an empty pool".into()));
    }
    let stats: Vec<PromptStats> = pool
        .par_iter()
        .enumerate()
        .map(|(i, instance)| {
            let g = GenConfig { seed: derive_seed(gen.seed, i as u64), ..gen.clone() };
            score_prompt(model, i, instance, k, &g)
        })
        .collect::<Result<_>>()?;
    let (selected, zero_signal) = argmax_variance(&stats)?;
    if zero_signal {
        log::warn!("every prompt has zero pass@{k} variance; falling back to pool index 0");
    }
    Ok(Selection { selected, stats, zero_signal })
}

/// `pool_index,kind,pass_at_k,variance,selected`
pub fn stats_csv(selection: &Selection) -> String {
    let mut out = String::from("pool_index,kind,pass_at_k,variance,selected\n");
    for s in &selection.stats {
        let chosen = u8::from(s.pool_index == selection.stats[selection.selected].pool_index);
        writeln!(out, "{},{},{},{},{}", s.pool_index, s.instance.kind, s.pass_at_k, s.variance, chosen).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_pool, TaskKind};

    fn stats(correct: usize, k: usize) -> PromptStats {
        let inst = make_pool(TaskKind::Add, 1, 1, 0).unwrap().remove(0);
        let outcomes = (0..k).map(|i| i < correct).collect();
        PromptStats::from_outcomes(0, inst, outcomes).unwrap()
    }

    /// The displayed definition: (1/k) Σ (1[correct] − pass@k)².
    fn explicit_variance(s: &PromptStats) -> f64 {
        let k = s.k as f64;
        s.per_sample_correct
            .iter()
            .map(|&c| (f64::from(u8::from(c)) - s.pass_at_k).powi(2))
            .sum::<f64>()
            / k
    }

    #[test]
    fn examples() {
        let half = stats(4, 8);
        assert_eq!((half.pass_at_k, half.variance), (0.5, 0.25));
        let none = stats(0, 8);
        assert_eq!((none.pass_at_k, none.variance), (0.0, 0.0));
        let most = stats(6, 8);
        assert_eq!(most.pass_at_k, 0.75);
        assert!((most.variance - 0.1875).abs() < 1e-15);
        assert!((explicit_variance(&most) - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn identity_and_maximum_over_counts() {
        for k in 2..=64 {
            let mut best = (0, -1.0);
            for c in 0..=k {
                let s = stats(c, k);
                assert!((s.variance - explicit_variance(&s)).abs() < 1e-12, "k={k} c={c}");
                assert!(s.variance <= 0.25);
                if s.variance > best.1 {
                    best = (c, s.variance);
                }
            }
            assert!(best.0 == k / 2 || best.0 == k.div_ceil(2), "k={k} c={}", best.0);
        }
    }

    #[test]
    fn argmax_prefers_earliest_tie() {
        let table = vec![stats(2, 8), stats(6, 8), stats(8, 8)];
        assert_eq!(argmax_variance(&table).unwrap(), (0, false));
        let flat = vec![stats(0, 8), stats(8, 8)];
        assert_eq!(argmax_variance(&flat).unwrap(), (0, true));
        assert!(argmax_variance(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut a = stats(4, 8);
        a.pool_index = 0;
        let mut b = stats(0, 8);
        b.pool_index = 1;
        let sel = Selection { selected: 0, stats: vec![a, b], zero_signal: false };
        assert_eq!(
            stats_csv(&sel),
            "pool_index,kind,pass_at_k,variance,selected\n0,add,0.5,0.25,1\n1,add,0,0,0\n"
        );
    }
}
