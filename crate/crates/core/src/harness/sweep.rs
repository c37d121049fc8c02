//! Cross products of one training or evaluation variable with seeds.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tasks::TaskInstance;

use super::{check_disjoint, evaluate, train_em, EvalConfig, TrainConfig, TrainOptions, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    TrainTemperature,
    EvalTemperature,
    LearningRate,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::TrainTemperature => "train_temperature",
            SweepVariable::EvalTemperature => "eval_temperature",
            SweepVariable::LearningRate => "learning_rate",
        })
    }
}

fn default_seeds() -> Vec<u64> {
    (0..16).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one value and one seed".into()));
        }
        for &v in &self.values {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sweep value {v} must be positive")));
            }
        }
        self.base.validate()
    }

    fn train_config(&self, value: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..self.base.clone() };
        match self.variable {
            SweepVariable::TrainTemperature => cfg.train_temperature = value,
            SweepVariable::LearningRate => cfg.learning_rate = value,
            SweepVariable::EvalTemperature => {}
        }
        cfg
    }

    fn eval_config(&self, value: f64) -> EvalConfig {
        match self.variable {
            SweepVariable::EvalTemperature => EvalConfig { temperature: value, ..self.eval.clone() },
            _ => self.eval.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub value: f64,
    pub seed: u64,
    pub step: usize,
    pub metric: String,
    pub metric_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub value: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: f64,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variable: SweepVariable,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<RunFailure>,
    pub summaries: Vec<SummaryRow>,
    pub runs: usize,
}

/// Final-step metrics that get per-value mean/max summaries.
const SUMMARISED: [&str; 4] = ["greedy_accuracy", "avg_at_k", "em_loss", "mean_generation_entropy"];

impl SweepTable {
    /// `variable,value,seed,step,metric,metric_value`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,value,seed,step,metric,metric_value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", self.variable, r.value, r.seed, r.step, r.metric, r.metric_value).unwrap();
        }
        out
    }

    /// `variable,value,metric,runs,mean,max`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variable,value,metric,runs,mean,max\n");
        for s in &self.summaries {
            writeln!(out, "{},{},{},{},{},{}", self.variable, s.value, s.metric, s.runs, s.mean, s.max).unwrap();
        }
        out
    }

    /// `AllRunsFailed` when no run of the sweep completed.
    pub fn check(&self) -> Result<()> {
        if self.runs > 0 && self.failures.len() == self.runs {
            return Err(Error::AllRunsFailed(self.runs));
        }
        Ok(())
    }

    /// Final-step value of `metric` for every completed run with `value`.
    pub fn finals(&self, value: f64, metric: &str) -> Vec<(u64, f64)> {
        let last = self
            .rows
            .iter()
            .filter(|r| r.value == value && r.metric == metric)
            .fold(Vec::<(u64, usize, f64)>::new(), |mut acc, r| {
                match acc.iter_mut().find(|(s, _, _)| *s == r.seed) {
                    Some(e) if r.step >= e.1 => *e = (r.seed, r.step, r.metric_value),
                    Some(_) => {}
                    None => acc.push((r.seed, r.step, r.metric_value)),
                }
                acc
            });
        last.into_iter().map(|(s, _, v)| (s, v)).collect()
    }
}

fn run_rows(value: f64, seed: u64, out: &TrainOutput, metrics: &[(&str, f64)]) -> Vec<MetricRow> {
    let row = |step, metric: &str, metric_value| MetricRow { value, seed, step, metric: metric.to_string(), metric_value };
    let r = &out.record;
    let mut rows = vec![
        row(0, "em_loss", r.initial.em_loss),
        row(0, "mean_generation_entropy", r.initial.mean_generation_entropy),
    ];
    for s in &r.steps {
        rows.push(row(s.step, "batch_em_loss", s.em_loss));
        rows.push(row(s.step, "batch_entropy", s.mean_generation_entropy));
        rows.push(row(s.step, "learning_rate", s.learning_rate));
    }
    let last = r.config.steps;
    if last > 0 {
        rows.push(row(last, "em_loss", r.final_probe.em_loss));
        rows.push(row(last, "mean_generation_entropy", r.final_probe.mean_generation_entropy));
    }
    for &(m, v) in metrics {
        rows.push(row(last, m, v));
    }
    rows
}

/// Train from `base` on `prompt` for every (value, seed) pair and evaluate
/// on `eval_pool`. Failed runs are recorded and the sweep continues.
/// Evaluation-temperature sweeps train once per seed.
pub fn sweep(cfg: &SweepConfig, base: &ModelParams, prompt: &TaskInstance, eval_pool: &[TaskInstance]) -> Result<SweepTable> {
    cfg.validate()?;
    check_disjoint(eval_pool, prompt)?;
    let trains_per_value = cfg.variable != SweepVariable::EvalTemperature;
    let train_values: Vec<Option<f64>> =
        if trains_per_value { cfg.values.iter().copied().map(Some).collect() } else { vec![None] };
    let jobs: Vec<(Option<f64>, u64)> =
        train_values.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Vec<(f64, u64, Result<Vec<MetricRow>>)>> = jobs
        .par_iter()
        .map(|&(train_value, seed)| {
            let tcfg = cfg.train_config(train_value.unwrap_or(0.0), seed);
            let trained = train_em(base, prompt, &tcfg, &TrainOptions::default());
            let eval_values: Vec<f64> = match train_value {
                Some(v) => vec![v],
                None => cfg.values.clone(),
            };
            eval_values
                .into_iter()
                .map(|v| {
                    let rows = trained.as_ref().map_err(clone_error).and_then(|out| {
                        let report = evaluate(&out.params, eval_pool, &cfg.eval_config(v))?;
                        Ok(run_rows(
                            v,
                            seed,
                            out,
                            &[("greedy_accuracy", report.greedy_accuracy), ("avg_at_k", report.avg_at_k)],
                        ))
                    });
                    (v, seed, rows)
                })
                .collect()
        })
        .collect();
    let mut flat: Vec<(f64, u64, Result<Vec<MetricRow>>)> = results.into_iter().flatten().collect();
    let order = |v: f64| cfg.values.iter().position(|&x| x == v).unwrap_or(usize::MAX);
    flat.sort_by_key(|(v, s, _)| (order(*v), cfg.seeds.iter().position(|x| x == s)));
    let runs = flat.len();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (value, seed, result) in flat {
        match result {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("sweep run {}={value} seed {seed} failed: {e}", cfg.variable);
                failures.push(RunFailure { value, seed, error: e.to_string() });
            }
        }
    }
    let mut table = SweepTable { variable: cfg.variable, rows, failures, summaries: Vec::new(), runs };
    for &value in &cfg.values {
        for metric in SUMMARISED {
            let finals: Vec<f64> = table.finals(value, metric).into_iter().map(|(_, v)| v).collect();
            if finals.is_empty() {
                continue;
            }
            table.summaries.push(SummaryRow {
                value,
                metric: metric.to_string(),
                runs: finals.len(),
                mean: finals.iter().sum::<f64>() / finals.len() as f64,
                max: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(table)
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(m.clone()),
        Error::Degenerate(m) => Error::Degenerate(m.clone()),
        other => Error::Contract(other.to_string()),
    }
}
