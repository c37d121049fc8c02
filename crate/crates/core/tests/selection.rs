mod common;

use common::{pad_model, perfect_model, rigged_model};
use emlab::generation::GenConfig;
use emlab::selection::{score_prompt, select_prompt, stats_csv};
use emlab::tasks::{TaskInstance, TaskKind, Tokenizer};
use emlab::Error;

fn single_digit_pool(n: usize) -> Vec<TaskInstance> {
    let tok = Tokenizer::new();
    (0..n)
        .map(|i| {
            let (a, b) = (i % 5, i / 5);
            TaskInstance::new(TaskKind::Add, format!("{a}+{b}="), (a + b).to_string(), &tok).unwrap()
        })
        .collect()
}

#[test]
fn rigged_pool_selects_the_coin_flip() {
    let pool = single_digit_pool(3);
    let model = rigged_model(&pool, &[0.1, 0.5, 0.9]);
    let hits = (0..100)
        .filter(|&seed| select_prompt(&model, &pool, 32, &GenConfig::new(1.0, 2, seed)).unwrap().selected == 1)
        .count();
    assert!(hits >= 95, "{hits}");
}

#[test]
fn single_informative_prompt_wins() {
    let pool = single_digit_pool(5);
    let probs = [0.0, 1.0, 0.0, 0.5, 1.0];
    let model = rigged_model(&pool, &probs.map(|p: f64| p.clamp(1e-300, 1.0 - 1e-16)));
    let sel = select_prompt(&model, &pool, 16, &GenConfig::new(1.0, 2, 3)).unwrap();
    assert_eq!(sel.selected, 3);
    assert!(!sel.zero_signal);
    for (i, s) in sel.stats.iter().enumerate() {
        assert_eq!(s.pool_index, i);
        assert_eq!(s.per_sample_correct.len(), 16);
        assert!((s.variance - s.pass_at_k * (1.0 - s.pass_at_k)).abs() < 1e-12);
    }
}

#[test]
fn permuting_the_pool_permutes_the_selection() {
    let pool = single_digit_pool(6);
    let probs = [0.0, 1.0, 0.5, 0.0, 1.0, 0.0];
    let order = [4, 2, 0, 5, 1, 3];
    let permuted: Vec<TaskInstance> = order.iter().map(|&i| pool[i].clone()).collect();
    let permuted_probs: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
    let clamp = |p: &f64| p.clamp(1e-300, 1.0 - 1e-16);
    let a = select_prompt(&rigged_model(&pool, &probs.iter().map(clamp).collect::<Vec<_>>()), &pool, 16, &GenConfig::new(1.0, 2, 1)).unwrap();
    let b = select_prompt(
        &rigged_model(&permuted, &permuted_probs.iter().map(clamp).collect::<Vec<_>>()),
        &permuted,
        16,
        &GenConfig::new(1.0, 2, 1),
    )
    .unwrap();
    assert_eq!(a.instance(), b.instance());
}

#[test]
fn deterministic_models_carry_no_signal() {
    let pool = single_digit_pool(4);
    let sel = select_prompt(&perfect_model(&pool), &pool, 8, &GenConfig::new(1.0, 4, 0)).unwrap();
    assert_eq!(sel.selected, 0);
    assert!(sel.zero_signal);
    assert!(sel.stats.iter().all(|s| s.pass_at_k == 1.0));
    let sel = select_prompt(&pad_model(), &pool, 8, &GenConfig::new(1.0, 4, 0)).unwrap();
    assert!(sel.zero_signal && sel.stats.iter().all(|s| s.pass_at_k == 0.0));
    let csv = stats_csv(&sel);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
}

#[test]
fn selection_is_reproducible() {
    let pool = single_digit_pool(3);
    let model = rigged_model(&pool, &[0.3, 0.5, 0.7]);
    let gen = GenConfig::new(1.0, 2, 9);
    let a = select_prompt(&model, &pool, 8, &gen).unwrap();
    let b = select_prompt(&model, &pool, 8, &gen).unwrap();
    assert_eq!(a.stats, b.stats);
}

#[test]
fn argument_errors() {
    let pool = single_digit_pool(2);
    let model = perfect_model(&pool);
    assert!(matches!(select_prompt(&model, &[], 8, &GenConfig::new(1.0, 2, 0)), Err(Error::Contract(_))));
    assert!(matches!(score_prompt(&model, 0, &pool[0], 1, &GenConfig::new(1.0, 2, 0)), Err(Error::Contract(_))));
}
