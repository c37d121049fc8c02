//! Supervised pretraining of a base model whose held-out greedy accuracy
//! lands inside a target band.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, Weights};
use crate::optim::Adam;
use crate::rng::{self, derive_seed};
use crate::tasks::{make_pool, TaskInstance, TaskKind, Tokenizer};
use crate::tensor::{Tape, Tensor};

use super::greedy_accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub task: TaskKind,
    /// Operand digit counts; the pools mix them in equal shares.
    pub difficulties: Vec<u32>,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::heldout_size")]
    pub heldout_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Optimizer steps between held-out accuracy checks.
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::band")]
    pub band: (f64, f64),
    /// In-band accuracy checks to accumulate before stopping.
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn train_size() -> usize {
        2000
    }
    pub fn heldout_size() -> usize {
        200
    }
    pub fn epochs() -> usize {
        40
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn eval_every() -> usize {
        20
    }
    pub fn band() -> (f64, f64) {
        (0.3, 0.7)
    }
    pub fn patience() -> usize {
        1
    }
}

impl PretrainConfig {
    pub fn new(task: TaskKind, difficulties: Vec<u32>) -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            task,
            difficulties,
            train_size: defaults::train_size(),
            heldout_size: defaults::heldout_size(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            eval_every: defaults::eval_every(),
            band: defaults::band(),
            patience: defaults::patience(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_size == 0 || self.heldout_size == 0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("pool sizes, batch size, eval interval and patience must be positive".into()));
        }
        if self.difficulties.is_empty() {
            return Err(Error::Config("at least one difficulty is required".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let (lo, hi) = self.band;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("accuracy band ({lo}, {hi}) is not a sub-interval of [0, 1]")));
        }
        Ok(())
    }

    /// Generation budget that fits every answer of this task plus eos.
    pub fn max_new_tokens(&self) -> usize {
        self.difficulties.iter().max().map_or(1, |&d| d as usize) + 3
    }
}

/// Deterministic training pool and a held-out pool with no prompt in common.
pub fn pretrain_pools(cfg: &PretrainConfig) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    cfg.validate()?;
    let train = mixed_pool(cfg, cfg.train_size, derive_seed(cfg.seed, 1))?;
    let seen: HashSet<&str> = train.iter().map(|t| t.prompt_text.as_str()).collect();
    let candidates = mixed_pool(cfg, cfg.heldout_size * 4 + 64, derive_seed(cfg.seed, 2))?;
    let mut held = HashSet::new();
    let heldout: Vec<TaskInstance> = candidates
        .into_iter()
        .filter(|t| !seen.contains(t.prompt_text.as_str()) && held.insert(t.prompt_text.clone()))
        .take(cfg.heldout_size)
        .collect();
    if heldout.len() < cfg.heldout_size {
        return Err(Error::Config(format!(
            "task space too small for {} held-out prompts disjoint from training",
            cfg.heldout_size
        )));
    }
    Ok((train, heldout))
}

/// `n` instances cycling through the configured difficulties.
fn mixed_pool(cfg: &PretrainConfig, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let k = cfg.difficulties.len();
    let mut parts = cfg
        .difficulties
        .iter()
        .enumerate()
        .map(|(i, &d)| Ok(make_pool(cfg.task, n.div_ceil(k), d, derive_seed(seed, i as u64))?.into_iter()))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n).filter_map(|i| parts[i % k].next()).collect())
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    pub heldout_accuracy: f64,
    pub steps: usize,
}

/// Mean next-token cross-entropy over the answer and eos positions of
/// `batch`, with gradients for every parameter.
pub fn cross_entropy_step(params: &ModelParams, batch: &[&TaskInstance]) -> Result<(f64, Weights<Tensor>)> {
    let tokenizer = Tokenizer::new();
    let solved: Vec<Vec<usize>> = batch.iter().map(|t| t.solved_tokens(&tokenizer)).collect();
    let longest = solved.iter().map(Vec::len).max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::Degenerate("nothing to predict".into()));
    }
    let seq_len = longest - 1;
    let pad = params.config.pad_token;
    let mut tokens = Vec::with_capacity(batch.len() * seq_len);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (seq, inst)) in solved.iter().zip(batch).enumerate() {
        let take = seq.len().min(seq_len);
        tokens.extend_from_slice(&seq[..take]);
        tokens.extend(std::iter::repeat_n(pad, seq_len - take));
        for j in inst.prompt_tokens.len()..seq.len() {
            rows.push(b * seq_len + j - 1);
            targets.push(seq[j]);
        }
    }
    let mut tape = Tape::new();
    let w = params.register(&mut tape);
    let logits = forward(&mut tape, &params.config, &w, &tokens, batch.len(), seq_len)?;
    let v = params.config.vocab_size;
    let flat = tape.reshape(logits, &[batch.len() * seq_len, v])?;
    let picked = tape.gather_rows(flat, &rows)?;
    let logp = tape.log_softmax(picked)?;
    let hit = tape.pick(logp, &targets)?;
    let total = tape.sum(hit);
    let loss = tape.scale(total, -1.0 / targets.len() as f64);
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g = w.map(|&var| grads.take(var).expect("parameters receive gradients"));
    Ok((value, g))
}

/// Train on `train` until greedy accuracy on `heldout` falls inside
/// `cfg.band`. Zero epochs returns the initialisation unchanged.
pub fn pretrain_base(cfg: &PretrainConfig, train: &[TaskInstance], heldout: &[TaskInstance]) -> Result<Pretrained> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Contract("pretraining needs non-empty training and held-out pools".into()));
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let max_new = cfg.max_new_tokens();
    if cfg.epochs == 0 {
        let heldout_accuracy = greedy_accuracy(&params, heldout, max_new)?;
        return Ok(Pretrained { params, heldout_accuracy, steps: 0 });
    }
    let (lo, hi) = cfg.band;
    let mut adam = Adam::new(&params, cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut last = 0.0;
    let mut in_band: Option<Pretrained> = None;
    let mut in_band_checks = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(derive_seed(cfg.seed, 3), epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TaskInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = cross_entropy_step(&params, &batch)?;
            adam.step(&mut params, &grads)?;
            steps += 1;
            if steps % cfg.eval_every != 0 {
                continue;
            }
            last = greedy_accuracy(&params, heldout, max_new)?;
            log::debug!("pretrain step {steps} epoch {epoch} loss {loss:.4} held-out accuracy {last:.3}");
            if last > hi {
                return match in_band {
                    Some(p) => {
                        log::info!("accuracy left the band at step {steps}; keeping step {}", p.steps);
                        Ok(p)
                    }
                    None => Err(Error::Calibration(format!(
                        "held-out accuracy jumped to {last:.3} above the band [{lo}, {hi}] at step {steps}; \
                         raise the task difficulty or check accuracy more often"
                    ))),
                };
            }
            if last >= lo {
                in_band = Some(Pretrained { params: params.clone(), heldout_accuracy: last, steps });
                in_band_checks += 1;
                if in_band_checks >= cfg.patience {
                    log::info!("pretrained base in band: accuracy {last:.3} after {steps} steps");
                    return Ok(in_band.unwrap());
                }
            }
        }
    }
    in_band.ok_or_else(|| {
        Error::Calibration(format!(
            "held-out accuracy {last:.3} still below the band [{lo}, {hi}] after {} epochs; \
             lower the task difficulty or allow more epochs",
            cfg.epochs
        ))
    })
}

/// Try each difficulty in turn and return the first in-band base model.
pub fn calibrate(cfg: &PretrainConfig, difficulties: &[u32]) -> Result<(u32, Pretrained)> {
    let mut last = None;
    for &d in difficulties {
        let c = PretrainConfig { difficulties: vec![d], ..cfg.clone() };
        let (train, heldout) = pretrain_pools(&c)?;
        match pretrain_base(&c, &train, &heldout) {
            Ok(p) => return Ok((d, p)),
            Err(e @ Error::Calibration(_)) => {
                log::warn!("difficulty {d}: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Config("no difficulty to calibrate".into())))
}
