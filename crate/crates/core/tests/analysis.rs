mod common;

use common::{perfect_model, STUB_VOCAB};
use emlab::analysis::{collect_logits, compare_models, skew_report, skewness, LogitsDump};
use emlab::generation::GenConfig;
use emlab::model::{ModelConfig, ModelParams};
use emlab::tasks::{make_pool, TaskInstance, TaskKind, Tokenizer};

#[test]
fn dump_length_counts_generated_rows() {
    let tok = Tokenizer::new();
    let pool = vec![TaskInstance::new(TaskKind::Add, "5+6=".into(), "11".into(), &tok).unwrap()];
    let dump = collect_logits(&perfect_model(&pool), "perfect", &pool, 1, &GenConfig::new(1.0, 8, 0)).unwrap();
    assert_eq!(dump.vocab_size, STUB_VOCAB);
    assert_eq!(dump.values.len(), 3 * STUB_VOCAB);
    let dump = collect_logits(&perfect_model(&pool), "perfect", &pool, 5, &GenConfig::new(1.0, 8, 0)).unwrap();
    assert_eq!(dump.values.len(), 5 * 3 * STUB_VOCAB);
    assert_eq!(dump.provenance.responses_per_prompt, 5);
}

#[test]
fn collection_is_deterministic_and_round_trips() {
    let model = ModelParams::init(&ModelConfig::default(), 4).unwrap();
    let prompts = make_pool(TaskKind::Add, 20, 2, 1).unwrap();
    let gen = GenConfig::new(0.5, 8, 99);
    let a = collect_logits(&model, "base", &prompts, 20, &gen).unwrap();
    let b = collect_logits(&model, "base", &prompts, 20, &gen).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.values.len() % model.config.vocab_size, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.logits");
    a.save(&path).unwrap();
    let back = LogitsDump::load(&path).unwrap();
    assert_eq!(back.values, a.values);
    assert_eq!(back.provenance, a.provenance);
}

#[test]
fn comparison_reports_pairwise_deltas() {
    let prompts = make_pool(TaskKind::Copy, 4, 3, 2).unwrap();
    let gen = GenConfig::new(1.0, 6, 5);
    let dumps: Vec<LogitsDump> = (0..3)
        .map(|s| {
            let model = ModelParams::init_with_std(&ModelConfig::default(), s, 0.1 * (s + 1) as f64).unwrap();
            collect_logits(&model, &format!("m{s}"), &prompts, 4, &gen).unwrap()
        })
        .collect();
    let cmp = compare_models(&dumps).unwrap();
    assert_eq!(cmp.models.len(), 3);
    assert_eq!(cmp.deltas.len(), 3);
    let s0 = skewness(&dumps[0].values).unwrap();
    let s1 = skewness(&dumps[1].values).unwrap();
    assert!((cmp.deltas[0].delta - (s1 - s0)).abs() < 1e-12);
    let report = skew_report(&dumps[2].values).unwrap();
    assert_eq!(report.histogram.total() as usize, dumps[2].values.len());
    assert_eq!(cmp.overlay.counts.len(), 3);
}
