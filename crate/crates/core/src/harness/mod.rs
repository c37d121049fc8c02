//! Experimental protocol: base pretraining, one-shot entropy-minimisation
//! training, evaluation and parameter sweeps.

mod pretrain;
mod sweep;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pretrain::{calibrate, cross_entropy_step, pretrain_base, pretrain_pools, PretrainConfig, Pretrained};
pub use sweep::{sweep, MetricRow, RunFailure, SummaryRow, SweepConfig, SweepTable, SweepVariable};

use crate::error::{Error, Result};
use crate::generation::{greedy_decode, sample_batch, sample_batch_with_logits, GenConfig, Sequence};
use crate::model::{LanguageModel, ModelParams};
use crate::objective::{em_loss, em_loss_value, generated_entropy, Averaging};
use crate::optim::Adam;
use crate::rng::derive_seed;
use crate::tasks::{is_correct, TaskInstance, Tokenizer};
use crate::tensor::Tape;

/// Stream index of the fixed-seed measurement batch used for before/after
/// comparisons; training steps use indices `1..=steps`.
const PROBE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub train_temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            steps: 10,
            batch_size: 64,
            train_temperature: 0.5,
            seed: 0,
            max_new_tokens: 8,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_new_tokens == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, max_new_tokens and checkpoint_every must be positive".into()));
        }
        self.gen(0).validate()
    }

    fn gen(&self, seed: u64) -> GenConfig {
        GenConfig::new(self.train_temperature, self.max_new_tokens, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 8, temperature: 0.5, max_new_tokens: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub prompt: String,
    pub greedy_correct: bool,
    pub sampled_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub temperature: f64,
    pub greedy_accuracy: f64,
    /// Mean over the pool of pass@k at `temperature`.
    pub avg_at_k: f64,
    pub instances: Vec<InstanceResult>,
}

/// Fraction of `pool` solved by greedy decoding.
pub fn greedy_accuracy(model: &(impl LanguageModel + ?Sized), pool: &[TaskInstance], max_new_tokens: usize) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Contract("evaluation pool is empty".into()));
    }
    let tokenizer = Tokenizer::new();
    let hits = pool
        .par_iter()
        .map(|t| Ok(is_correct(t, &greedy_decode(model, &t.prompt_tokens, max_new_tokens)?, &tokenizer)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / pool.len() as f64)
}

/// Greedy accuracy and avg@k over `pool`. Instance `i` samples with seed
/// `derive_seed(cfg.seed, i)`.
pub fn evaluate(model: &(impl LanguageModel + ?Sized), pool: &[TaskInstance], cfg: &EvalConfig) -> Result<EvalReport> {
    if pool.is_empty() {
        return Err(Error::Contract("evaluation pool is empty".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("avg@k needs k >= 1".into()));
    }
    let tokenizer = Tokenizer::new();
    let instances = pool
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let greedy = greedy_decode(model, &t.prompt_tokens, cfg.max_new_tokens)?;
            let gen = GenConfig::new(cfg.temperature, cfg.max_new_tokens, derive_seed(cfg.seed, i as u64));
            let samples = sample_batch(model, &t.prompt_tokens, cfg.k, &gen)?;
            Ok(InstanceResult {
                prompt: t.prompt_text.clone(),
                greedy_correct: is_correct(t, &greedy, &tokenizer),
                sampled_correct: samples.iter().filter(|s| is_correct(t, s, &tokenizer)).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pool.len() as f64;
    let greedy_accuracy = instances.iter().filter(|r| r.greedy_correct).count() as f64 / n;
    let avg_at_k = instances.iter().map(|r| r.sampled_correct as f64 / cfg.k as f64).sum::<f64>() / n;
    Ok(EvalReport { k: cfg.k, temperature: cfg.temperature, greedy_accuracy, avg_at_k, instances })
}

/// The evaluation pool must not contain the training prompt.
pub fn check_disjoint(pool: &[TaskInstance], prompt: &TaskInstance) -> Result<()> {
    if pool.iter().any(|t| t.prompt_tokens == prompt.prompt_tokens) {
        return Err(Error::Contract(format!("evaluation pool contains the training prompt {:?}", prompt.prompt_text)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Loss on this step's batch, before the update.
    pub em_loss: f64,
    /// Mean token entropy of this step's batch, before the update.
    pub mean_generation_entropy: f64,
    pub learning_rate: f64,
}

/// Entropy measurements on a fixed-seed batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub em_loss: f64,
    pub mean_generation_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScore {
    pub temperature: f64,
    pub avg_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub greedy_accuracy: f64,
    pub k: usize,
    pub avg_at_k: Vec<TemperatureScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub step: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: TrainConfig,
    pub prompts: Vec<String>,
    pub initial: Probe,
    #[serde(rename = "final")]
    pub final_probe: Probe,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<CheckpointRef>,
}

/// Step of the best greedy accuracy next to the step of the lowest loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub peak_accuracy_step: usize,
    pub min_loss_step: usize,
}

impl RunRecord {
    /// `None` without evaluations or steps. Earliest step wins ties.
    pub fn divergence(&self) -> Option<Divergence> {
        let peak = self.evals.iter().fold(None::<&EvalRecord>, |best, e| match best {
            Some(b) if b.greedy_accuracy >= e.greedy_accuracy => Some(b),
            _ => Some(e),
        })?;
        let min = self.steps.iter().fold(None::<&StepRecord>, |best, s| match best {
            Some(b) if b.em_loss <= s.em_loss => Some(b),
            _ => Some(s),
        })?;
        Some(Divergence { peak_accuracy_step: peak.step, min_loss_step: min.step })
    }

    /// `step,em_loss,mean_generation_entropy,learning_rate`
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,em_loss,mean_generation_entropy,learning_rate\n");
        for s in &self.steps {
            writeln!(out, "{},{},{},{}", s.step, s.em_loss, s.mean_generation_entropy, s.learning_rate).unwrap();
        }
        out
    }
}

/// Wall-clock timings, kept apart from the deterministic record.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub pool: Vec<TaskInstance>,
    /// Evaluate at step 0, every `every` steps and after the final step.
    pub every: usize,
    pub k: usize,
    pub temperatures: Vec<f64>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub eval: Option<EvalPlan>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub record: RunRecord,
    pub log: RunLog,
    /// Distinct prompts whose tokens entered a training batch.
    pub training_prompts: usize,
}

fn probe(model: &ModelParams, prompt: &TaskInstance, cfg: &TrainConfig) -> Result<Probe> {
    let gens = sample_batch_with_logits(model, &prompt.prompt_tokens, cfg.batch_size, &cfg.gen(derive_seed(cfg.seed, PROBE_STREAM)))?;
    let seqs: Vec<Sequence> = gens.iter().map(|g| g.sequence.clone()).collect();
    Ok(Probe {
        em_loss: em_loss_value(model, &seqs, Averaging::PerSequence)?,
        mean_generation_entropy: generated_entropy(&gens, model.config.pad_token)?,
    })
}

fn eval_record(model: &ModelParams, plan: &EvalPlan, step: usize) -> Result<EvalRecord> {
    let mut greedy = None;
    let mut avg_at_k = Vec::new();
    for &temperature in &plan.temperatures {
        let cfg = EvalConfig { k: plan.k, temperature, max_new_tokens: plan.max_new_tokens, seed: plan.seed };
        let report = evaluate(model, &plan.pool, &cfg)?;
        greedy.get_or_insert(report.greedy_accuracy);
        avg_at_k.push(TemperatureScore { temperature, avg_at_k: report.avg_at_k });
    }
    let greedy_accuracy = match greedy {
        Some(g) => g,
        None => greedy_accuracy(model, &plan.pool, plan.max_new_tokens)?,
    };
    Ok(EvalRecord { step, greedy_accuracy, k: plan.k, avg_at_k })
}

/// Entropy-minimisation training on a fixed prompt list; step `s` trains
/// on `prompts[(s − 1) % len]`.
pub fn train_on_prompts(
    base: &ModelParams,
    prompts: &[TaskInstance],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Contract("training needs at least one prompt".into()));
    }
    let start = Instant::now();
    let mut params = base.clone();
    let mut adam = Adam::new(&params, cfg.learning_rate)?;
    let mut registry: HashSet<Vec<usize>> = HashSet::new();
    let mut log = RunLog::default();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(plan) = &opts.eval {
        for p in prompts {
            check_disjoint(&plan.pool, p)?;
        }
        evals.push(eval_record(&params, plan, 0)?);
    }
    let initial = probe(&params, &prompts[0], cfg)?;
    for step in 1..=cfg.steps {
        let tick = Instant::now();
        let prompt = &prompts[(step - 1) % prompts.len()];
        let gens = sample_batch_with_logits(&params, &prompt.prompt_tokens, cfg.batch_size, &cfg.gen(derive_seed(cfg.seed, step as u64)))?;
        let mean_generation_entropy = generated_entropy(&gens, params.config.pad_token)?;
        let batch: Vec<Sequence> = gens.into_iter().map(|g| g.sequence).collect();
        registry.extend(batch.iter().map(|s| s.prompt().to_vec()));
        let mut tape = Tape::new();
        let w = params.register(&mut tape);
        let loss = em_loss(&mut tape, &params.config, &w, &batch, Averaging::PerSequence)?;
        let em_loss = tape.value(loss).item()?;
        if !em_loss.is_finite() {
            return Err(Error::Numeric(format!("em_loss is {em_loss} at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let g = w.map(|&v| grads.take(v).expect("parameters receive gradients"));
        adam.step(&mut params, &g)?;
        log::debug!("step {step}: em_loss {em_loss:.5} entropy {mean_generation_entropy:.5}");
        steps.push(StepRecord { step, em_loss, mean_generation_entropy, learning_rate: adam.learning_rate });
        if let Some(dir) = &opts.checkpoint_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.steps {
                let path = dir.join(format!("step_{step:04}.ckpt"));
                params.save(&path)?;
                checkpoints.push(CheckpointRef { step, path });
            }
        }
        if let Some(plan) = &opts.eval {
            if (plan.every > 0 && step % plan.every == 0) || step == cfg.steps {
                evals.push(eval_record(&params, plan, step)?);
            }
        }
        log.step_seconds.push(tick.elapsed().as_secs_f64());
    }
    let final_probe = if cfg.steps == 0 { initial } else { probe(&params, &prompts[0], cfg)? };
    log.total_seconds = start.elapsed().as_secs_f64();
    let record = RunRecord {
        seed: cfg.seed,
        config: cfg.clone(),
        prompts: prompts.iter().map(|p| p.prompt_text.clone()).collect(),
        initial,
        final_probe,
        steps,
        evals,
        checkpoints,
    };
    Ok(TrainOutput { params, record, log, training_prompts: registry.len() })
}

/// One-shot training: every batch consists of responses to `prompt`.
pub fn train_em(base: &ModelParams, prompt: &TaskInstance, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutput> {
    let out = train_on_prompts(base, std::slice::from_ref(prompt), cfg, opts)?;
    if out.training_prompts > 1 {
        return Err(Error::Contract(format!("{} distinct prompts entered one-shot training", out.training_prompts)));
    }
    Ok(out)
}

/// Write `run.json`, `steps.csv` and the separate `run_log.json`.
pub fn write_run(dir: &Path, out: &TrainOutput) -> Result<()> {
    crate::io::write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&out.record)?)?;
    crate::io::write_atomic(&dir.join("steps.csv"), out.record.steps_csv().as_bytes())?;
    crate::io::write_atomic(&dir.join("run_log.json"), &serde_json::to_vec_pretty(&out.log)?)?;
    Ok(())
}
