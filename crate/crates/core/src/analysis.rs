//! Flattened-logits statistics.
//!
//! For every generated (non-pad) position of every sampled response, the
//! full vocabulary row of raw logits is appended to one flat vector, in
//! prompt, response, position, vocabulary order. Skewness is the third
//! standardised population moment of that vector.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{sample_batch_with_logits, GenConfig};
use crate::io::write_atomic;
use crate::model::LanguageModel;
use crate::rng::derive_seed;
use crate::tasks::TaskInstance;

pub const HISTOGRAM_BINS: usize = 101;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_tag: String,
    pub prompt_count: usize,
    pub responses_per_prompt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitsDump {
    pub provenance: Provenance,
    pub vocab_size: usize,
    pub values: Vec<f64>,
}

/// Generate `per_prompt` responses to each prompt and flatten their
/// generated-region logits. Prompt `i` samples with
/// `derive_seed(gen.seed, i)`.
pub fn collect_logits(
    model: &(impl LanguageModel + ?Sized),
    model_tag: &str,
    prompts: &[TaskInstance],
    per_prompt: usize,
    gen: &GenConfig,
) -> Result<LogitsDump> {
    if prompts.is_empty() {
        return Err(Error::Contract("collect_logits needs at least one prompt".into()));
    }
    if per_prompt == 0 {
        return Err(Error::Contract("collect_logits needs at least one response per prompt".into()));
    }
    let pad = model.pad_token();
    let mut values = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let g = GenConfig { seed: derive_seed(gen.seed, i as u64), ..gen.clone() };
        for response in sample_batch_with_logits(model, &prompt.prompt_tokens, per_prompt, &g)? {
            for (row, &token) in response.logits.iter().zip(response.sequence.generated()) {
                if token != pad {
                    values.extend_from_slice(row);
                }
            }
        }
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("collected non-finite logit {bad}")));
    }
    Ok(LogitsDump {
        provenance: Provenance {
            model_tag: model_tag.to_string(),
            prompt_count: prompts.len(),
            responses_per_prompt: per_prompt,
        },
        vocab_size: model.vocab_size(),
        values,
    })
}

/// Population mean and standard deviation (1/n normalisation).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(1/n) Σ ((z − μ) / σ)³` with population `σ`.
pub fn skewness(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Contract(format!("skewness needs at least 2 values, got {}", values.len())));
    }
    let (lo, hi) = min_max(values);
    let (mean, std) = mean_std(values);
    if lo == hi || std == 0.0 {
        return Err(Error::Degenerate("all values equal; skewness undefined".into()));
    }
    let n = values.len() as f64;
    Ok(values.iter().map(|z| ((z - mean) / std).powi(3)).sum::<f64>() / n)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn uniform(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let bin = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
            counts[bin.clamp(0, bins as isize - 1) as usize] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub histogram: Histogram,
}

pub fn skew_report(values: &[f64]) -> Result<SkewReport> {
    let skewness = skewness(values)?;
    let (mean, std) = mean_std(values);
    let (lo, hi) = min_max(values);
    Ok(SkewReport {
        n: values.len(),
        mean,
        std,
        skewness,
        histogram: Histogram::uniform(values, HISTOGRAM_BINS, lo, hi),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSkew {
    pub model_tag: String,
    pub provenance: Provenance,
    pub report: SkewReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewDelta {
    pub from: String,
    pub to: String,
    /// `skewness(to) − skewness(from)`
    pub delta: f64,
}

/// Histograms of every model on one shared grid, for overlay plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub models: Vec<ModelSkew>,
    pub deltas: Vec<SkewDelta>,
    pub overlay: Overlay,
}

/// Per-model reports plus every pairwise skewness delta `(i, j)`, `i < j`.
pub fn compare_models(dumps: &[LogitsDump]) -> Result<Comparison> {
    if dumps.len() < 2 {
        return Err(Error::Contract("compare_models needs at least two dumps".into()));
    }
    let models = dumps
        .iter()
        .map(|d| {
            Ok(ModelSkew {
                model_tag: d.provenance.model_tag.clone(),
                provenance: d.provenance.clone(),
                report: skew_report(&d.values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut deltas = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            deltas.push(SkewDelta {
                from: models[i].model_tag.clone(),
                to: models[j].model_tag.clone(),
                delta: models[j].report.skewness - models[i].report.skewness,
            });
        }
    }
    let lo = models.iter().map(|m| m.report.histogram.edges[0]).fold(f64::INFINITY, f64::min);
    let hi = models.iter().map(|m| *m.report.histogram.edges.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let shared: Vec<Histogram> = dumps.iter().map(|d| Histogram::uniform(&d.values, HISTOGRAM_BINS, lo, hi)).collect();
    let overlay = Overlay {
        edges: shared[0].edges.clone(),
        counts: shared.into_iter().map(|h| h.counts).collect(),
    };
    Ok(Comparison { models, deltas, overlay })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    provenance: Provenance,
    n: usize,
    vocab_size: usize,
}

impl LogitsDump {
    /// One JSON header line, then `n` little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DumpHeader { provenance: self.provenance.clone(), n: self.values.len(), vocab_size: self.vocab_size };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.reserve(self.values.len() * 8);
        for v in &self.values {
            out.write_all(&v.to_le_bytes()).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("dump has no header line".into()))?;
        let header: DumpHeader = serde_json::from_slice(&bytes[..newline])?;
        let body = &bytes[newline + 1..];
        if body.len() != header.n * 8 {
            return Err(Error::Format(format!("dump header says {} values, body holds {} bytes", header.n, body.len())));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(LogitsDump { provenance: header.provenance, vocab_size: header.vocab_size, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LogitsDump::from_bytes(&std::fs::read(path)?)
    }
}
