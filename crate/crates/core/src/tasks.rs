//! Synthetic verifiable tasks and the character-level tokenizer.
//!
//! Three prompt families, all answered by exact string match:
//!
//! - `add`: `"a+b="`, answer `a + b`
//! - `mod_sum`: `"a+b%m="`, answer `(a + b) mod m` for a single-digit `m ≥ 2`
//! - `copy`: `"copy:s="`, answer `s`
//!
//! `difficulty` is the operand digit count (the length of `s` for copy).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::Sequence;
use crate::io::write_atomic;
use crate::rng;

pub const PAD: usize = 0;
pub const EOS: usize = 1;

/// Printable symbols, assigned ids `2..` in this order.
const ALPHABET: &str = "0123456789+%= :copy";

/// Bijective map between the task alphabet and token ids. Ids 0 and 1 are
/// the pad and end-of-sequence markers and have no character form.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { chars: ALPHABET.chars().collect() }
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of ids in use, including pad and eos.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad(&self) -> usize {
        PAD
    }

    pub fn eos(&self) -> usize {
        EOS
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i + 2)
                    .ok_or_else(|| Error::Tokenizer(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                id.checked_sub(2)
                    .and_then(|i| self.chars.get(i).copied())
                    .ok_or_else(|| Error::Tokenizer(format!("id {id} has no character")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Add,
    ModSum,
    Copy,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::ModSum => "mod_sum",
            TaskKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(TaskKind::Add),
            "mod_sum" => Ok(TaskKind::ModSum),
            "copy" => Ok(TaskKind::Copy),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub prompt_text: String,
    pub prompt_tokens: Vec<usize>,
    /// Canonical answer string.
    pub answer: String,
    pub kind: TaskKind,
}

impl TaskInstance {
    pub fn new(kind: TaskKind, prompt_text: String, answer: String, tokenizer: &Tokenizer) -> Result<Self> {
        if answer.is_empty() {
            return Err(Error::Contract("task answer must be non-empty".into()));
        }
        tokenizer.encode(&answer)?;
        let prompt_tokens = tokenizer.encode(&prompt_text)?;
        if prompt_tokens.is_empty() {
            return Err(Error::Contract("task prompt must be non-empty".into()));
        }
        Ok(TaskInstance { prompt_text, prompt_tokens, answer, kind })
    }

    /// Prompt, answer and eos as one token sequence.
    pub fn solved_tokens(&self, tokenizer: &Tokenizer) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend(tokenizer.encode(&self.answer).expect("answers are validated at construction"));
        t.push(tokenizer.eos());
        t
    }
}

fn operand(rng: &mut impl Rng, digits: u32) -> u64 {
    rng.random_range(0..10u64.pow(digits))
}

fn digit_string(rng: &mut impl Rng, len: u32) -> String {
    (0..len).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

/// Deterministic pool of `n` instances.
pub fn make_pool(kind: TaskKind, n: usize, difficulty: u32, seed: u64) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::Contract("pool size must be at least 1".into()));
    }
    if !(1..=6).contains(&difficulty) {
        return Err(Error::Contract(format!("difficulty {difficulty} outside [1, 6]")));
    }
    let tokenizer = Tokenizer::new();
    let mut rng = rng::stream(seed, kind as u64 + 1);
    (0..n)
        .map(|_| {
            let (prompt, answer) = match kind {
                TaskKind::Add => {
                    let (a, b) = (operand(&mut rng, difficulty), operand(&mut rng, difficulty));
                    (format!("{a}+{b}="), (a + b).to_string())
                }
                TaskKind::ModSum => {
                    let (a, b) = (operand(&mut rng, difficulty), operand(&mut rng, difficulty));
                    let m = rng.random_range(2..10u64);
                    (format!("{a}+{b}%{m}="), ((a + b) % m).to_string())
                }
                TaskKind::Copy => {
                    let s = digit_string(&mut rng, difficulty);
                    (format!("copy:{s}="), s)
                }
            };
            TaskInstance::new(kind, prompt, answer, &tokenizer)
        })
        .collect()
}

/// Decode the generated region of `generated` up to eos (or the first pad),
/// trim surrounding whitespace and compare with the canonical answer.
pub fn check(instance: &TaskInstance, generated: &Sequence, tokenizer: &Tokenizer) -> Result<bool> {
    let prompt = &instance.prompt_tokens;
    if generated.tokens.len() < prompt.len() || generated.tokens[..prompt.len()] != prompt[..] {
        return Err(Error::Contract("generated sequence does not extend the prompt".into()));
    }
    let region = &generated.tokens[prompt.len()..];
    let end = region
        .iter()
        .position(|&t| t == tokenizer.eos() || t == tokenizer.pad())
        .unwrap_or(region.len());
    let text = tokenizer.decode(&region[..end])?;
    Ok(text.trim() == instance.answer)
}

/// [`check`], counting undecodable generations as wrong.
pub fn is_correct(instance: &TaskInstance, generated: &Sequence, tokenizer: &Tokenizer) -> bool {
    match check(instance, generated, tokenizer) {
        Ok(ok) => ok,
        Err(Error::Tokenizer(_)) => false,
        Err(e) => panic!("sequence was not generated from this prompt: {e}"),
    }
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    prompt: String,
    answer: String,
    kind: TaskKind,
}

pub fn pool_to_jsonl(pool: &[TaskInstance]) -> String {
    let mut out = String::new();
    for t in pool {
        let line = PoolLine { prompt: t.prompt_text.clone(), answer: t.answer.clone(), kind: t.kind };
        out.push_str(&serde_json::to_string(&line).expect("pool lines serialise"));
        out.push('\n');
    }
    out
}

pub fn pool_from_jsonl(text: &str) -> Result<Vec<TaskInstance>> {
    let tokenizer = Tokenizer::new();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: PoolLine = serde_json::from_str(l)?;
            TaskInstance::new(line.kind, line.prompt, line.answer, &tokenizer)
        })
        .collect()
}

pub fn save_pool(path: &Path, pool: &[TaskInstance]) -> Result<()> {
    write_atomic(path, pool_to_jsonl(pool).as_bytes())
}

pub fn load_pool(path: &Path) -> Result<Vec<TaskInstance>> {
    pool_from_jsonl(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(instance: &TaskInstance, generated: &str, eos: bool) -> Sequence {
        let tok = Tokenizer::new();
        let mut tokens = instance.prompt_tokens.clone();
        tokens.extend(tok.encode(generated).unwrap());
        if eos {
            tokens.push(EOS);
        }
        Sequence::new(tokens, instance.prompt_tokens.len(), eos, PAD).unwrap()
    }

    #[test]
    fn tokenizer_fits_default_vocab() {
        assert_eq!(Tokenizer::new().len(), 21);
        assert!(Tokenizer::new().len() <= 32);
    }

    #[test]
    fn single_add_instance() {
        let pool = make_pool(TaskKind::Add, 1, 1, 7).unwrap();
        let t = &pool[0];
        let (a, rest) = t.prompt_text.split_once('+').unwrap();
        let b = rest.strip_suffix('=').unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        let sum: u64 = a.parse::<u64>().unwrap() + b.parse::<u64>().unwrap();
        assert_eq!(t.answer, sum.to_string());
    }

    #[test]
    fn copy_answers_follow_prefix() {
        let pool = make_pool(TaskKind::Copy, 5, 2, 3).unwrap();
        assert_eq!(pool.len(), 5);
        for t in &pool {
            let s = t.prompt_text.strip_prefix("copy:").unwrap().strip_suffix('=').unwrap();
            assert_eq!(s.len(), 2);
            assert_eq!(t.answer, s);
        }
    }

    #[test]
    fn mod_sum_answers() {
        for t in make_pool(TaskKind::ModSum, 20, 2, 1).unwrap() {
            let body = t.prompt_text.strip_suffix('=').unwrap();
            let (sum, m) = body.split_once('%').unwrap();
            let (a, b) = sum.split_once('+').unwrap();
            let want = (a.parse::<u64>().unwrap() + b.parse::<u64>().unwrap()) % m.parse::<u64>().unwrap();
            assert_eq!(t.answer, want.to_string());
        }
    }

    #[test]
    fn pools_are_deterministic() {
        for kind in [TaskKind::Add, TaskKind::ModSum, TaskKind::Copy] {
            assert_eq!(make_pool(kind, 10, 3, 42).unwrap(), make_pool(kind, 10, 3, 42).unwrap());
            assert_ne!(make_pool(kind, 10, 3, 42).unwrap(), make_pool(kind, 10, 3, 43).unwrap());
        }
    }

    #[test]
    fn pool_arguments_are_validated() {
        assert!(make_pool(TaskKind::Add, 0, 1, 0).is_err());
        assert!(make_pool(TaskKind::Add, 1, 0, 0).is_err());
        assert!(make_pool(TaskKind::Add, 1, 7, 0).is_err());
    }

    #[test]
    fn check_examples() {
        let tok = Tokenizer::new();
        let t = TaskInstance::new(TaskKind::Add, "3+4=".into(), "7".into(), &tok).unwrap();
        assert!(check(&t, &seq(&t, "7", true), &tok).unwrap());
        assert!(!check(&t, &seq(&t, "8", true), &tok).unwrap());
        assert!(check(&t, &seq(&t, "7 ", true), &tok).unwrap());
        assert!(check(&t, &seq(&t, "7", false), &tok).unwrap());
        assert!(!check(&t, &seq(&t, "77", true), &tok).unwrap());
    }

    #[test]
    fn check_rejects_undecodable_ids() {
        let tok = Tokenizer::new();
        let t = TaskInstance::new(TaskKind::Add, "3+4=".into(), "7".into(), &tok).unwrap();
        let mut tokens = t.prompt_tokens.clone();
        tokens.extend([25, EOS]);
        let s = Sequence::new(tokens, 4, true, PAD).unwrap();
        assert!(matches!(check(&t, &s, &tok), Err(Error::Tokenizer(_))));
        assert!(!is_correct(&t, &s, &tok));
    }

    #[test]
    fn jsonl_round_trip() {
        let pool = make_pool(TaskKind::ModSum, 4, 2, 9).unwrap();
        let text = pool_to_jsonl(&pool);
        assert!(text.lines().next().unwrap().contains("\"kind\":\"mod_sum\""));
        assert_eq!(pool_from_jsonl(&text).unwrap(), pool);
    }

    #[test]
    fn checker_soundness_on_generated_pools() {
        let tok = Tokenizer::new();
        for kind in [TaskKind::Add, TaskKind::ModSum, TaskKind::Copy] {
            for t in make_pool(kind, 30, 3, 5).unwrap() {
                assert!(check(&t, &seq(&t, &t.answer, true), &tok).unwrap());
                for (i, c) in t.answer.char_indices() {
                    for replacement in "0123456789+%=:".chars().filter(|&r| r != c) {
                        let mut bad = t.answer.clone();
                        bad.replace_range(i..i + 1, &replacement.to_string());
                        assert!(!check(&t, &seq(&t, &bad, true), &tok).unwrap(), "{bad}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn tokenizer_is_bijective(text in "[0-9+%= :copy]{0,24}") {
            let tok = Tokenizer::new();
            let ids = tok.encode(&text).unwrap();
            prop_assert_eq!(&tok.decode(&ids).unwrap(), &text);
            prop_assert_eq!(tok.encode(&tok.decode(&ids).unwrap()).unwrap(), ids);
        }
    }
}
