use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emlab::analysis::{collect_logits, compare_models};
use emlab::generation::{GenConfig, Sequence};
use emlab::gradcheck::check_em_gradient;
use emlab::harness::{
    evaluate, pretrain_base, pretrain_pools, sweep, train_em, write_run, EvalConfig, EvalPlan, PretrainConfig,
    SweepConfig, TrainConfig, TrainOptions,
};
use emlab::io::write_atomic;
use emlab::model::{ModelConfig, ModelParams};
use emlab::selection::{select_prompt, stats_csv, DEFAULT_K};
use emlab::tasks::{load_pool, make_pool, save_pool, TaskInstance, TaskKind};
use emlab::{Error, Result};

#[derive(Parser)]
#[command(name = "emlab", version, about = "Entropy-minimisation experiments on tiny language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic task pool as JSON lines.
    MakePool {
        #[arg(long)]
        kind: TaskKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        difficulty: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a base model into the configured accuracy band.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the held-out pool used for calibration.
        #[arg(long)]
        heldout_out: Option<PathBuf>,
    },
    /// Score every prompt of a pool by pass@k variance.
    Select {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        temp: f64,
        #[arg(long, default_value_t = 8)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-shot entropy-minimisation training on one prompt of a pool.
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        prompt_index: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.5)]
        temp: f64,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_new: usize,
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        /// Held-out pool to evaluate on during training.
        #[arg(long)]
        eval_pool: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5])]
        eval_temps: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Greedy accuracy and avg@k of a checkpoint on a pool.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        temp: f64,
        #[arg(long, default_value_t = 8)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over a grid of values and seeds.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        prompt_index: usize,
        #[arg(long)]
        eval_pool: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Skewness of flattened logits for several checkpoints.
    Analyze {
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 20)]
        responses: usize,
        #[arg(long, default_value_t = 0.5)]
        temp: f64,
        #[arg(long, default_value_t = 8)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the raw logits dumps.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the entropy-loss gradient.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 12)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn pick(pool: &[TaskInstance], index: usize) -> Result<&TaskInstance> {
    pool.get(index)
        .ok_or_else(|| Error::Config(format!("prompt index {index} outside a pool of {}", pool.len())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakePool { kind, n, difficulty, seed, out } => save_pool(&out, &make_pool(kind, n, difficulty, seed)?),
        Command::Pretrain { config, out, heldout_out } => {
            let cfg: PretrainConfig = read_json(&config)?;
            let (train, heldout) = pretrain_pools(&cfg)?;
            let base = pretrain_base(&cfg, &train, &heldout)?;
            base.params.save(&out)?;
            if let Some(path) = heldout_out {
                save_pool(&path, &heldout)?;
            }
            println!("held-out greedy accuracy {:.3} after {} steps", base.heldout_accuracy, base.steps);
            Ok(())
        }
        Command::Select { ckpt, pool, k, temp, max_new, seed, out } => {
            let model = ModelParams::load(&ckpt)?;
            let selection = select_prompt(&model, &load_pool(&pool)?, k, &GenConfig::new(temp, max_new, seed))?;
            write_atomic(&out, stats_csv(&selection).as_bytes())?;
            println!("selected prompt {} ({:?})", selection.selected, selection.instance().prompt_text);
            Ok(())
        }
        Command::Train {
            ckpt,
            pool,
            prompt_index,
            steps,
            batch,
            temp,
            lr,
            seed,
            max_new,
            checkpoint_every,
            eval_pool,
            eval_every,
            eval_temps,
            out_dir,
        } => {
            let base = ModelParams::load(&ckpt)?;
            let pool = load_pool(&pool)?;
            let prompt = pick(&pool, prompt_index)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                steps,
                batch_size: batch,
                train_temperature: temp,
                seed,
                max_new_tokens: max_new,
                checkpoint_every,
            };
            let eval = match eval_pool {
                Some(path) => Some(EvalPlan {
                    pool: load_pool(&path)?,
                    every: eval_every,
                    k: DEFAULT_K,
                    temperatures: eval_temps,
                    max_new_tokens: max_new,
                    seed,
                }),
                None => None,
            };
            let opts = TrainOptions { checkpoint_dir: Some(out_dir.join("checkpoints")), eval };
            let out = train_em(&base, prompt, &cfg, &opts)?;
            write_run(&out_dir, &out)?;
            if let Some(d) = out.record.divergence() {
                println!("peak accuracy at step {}, minimum loss at step {}", d.peak_accuracy_step, d.min_loss_step);
            }
            println!(
                "em_loss {:.4} -> {:.4}, entropy {:.4} -> {:.4}",
                out.record.initial.em_loss,
                out.record.final_probe.em_loss,
                out.record.initial.mean_generation_entropy,
                out.record.final_probe.mean_generation_entropy
            );
            Ok(())
        }
        Command::Eval { ckpt, pool, k, temp, max_new, seed, out } => {
            let model = ModelParams::load(&ckpt)?;
            let cfg = EvalConfig { k, temperature: temp, max_new_tokens: max_new, seed };
            let report = evaluate(&model, &load_pool(&pool)?, &cfg)?;
            write_json(&out, &report)?;
            println!("greedy accuracy {:.3}, avg@{k} {:.3}", report.greedy_accuracy, report.avg_at_k);
            Ok(())
        }
        Command::Sweep { spec, ckpt, pool, prompt_index, eval_pool, out_dir } => {
            let cfg: SweepConfig = read_json(&spec)?;
            let base = ModelParams::load(&ckpt)?;
            let pool = load_pool(&pool)?;
            let table = sweep(&cfg, &base, pick(&pool, prompt_index)?, &load_pool(&eval_pool)?)?;
            write_atomic(&out_dir.join("metrics.csv"), table.to_csv().as_bytes())?;
            write_atomic(&out_dir.join("summary.csv"), table.summary_csv().as_bytes())?;
            write_json(&out_dir.join("failures.json"), &table.failures)?;
            println!("{} runs, {} failed", table.runs, table.failures.len());
            table.check()
        }
        Command::Analyze { ckpts, prompts, responses, temp, max_new, seed, dump_dir, out } => {
            let prompts = load_pool(&prompts)?;
            let gen = GenConfig::new(temp, max_new, seed);
            let dumps = ckpts
                .iter()
                .map(|path| {
                    let model = ModelParams::load(path)?;
                    let tag = path.display().to_string();
                    let dump = collect_logits(&model, &tag, &prompts, responses, &gen)?;
                    if let Some(dir) = &dump_dir {
                        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        dump.save(&dir.join(format!("{stem}.logits")))?;
                    }
                    Ok(dump)
                })
                .collect::<Result<Vec<_>>>()?;
            let comparison = compare_models(&dumps)?;
            write_json(&out, &comparison)?;
            for m in &comparison.models {
                println!("{}: skewness {:.4} over {} logits", m.model_tag, m.report.skewness, m.report.n);
            }
            Ok(())
        }
        Command::GradCheck { config, tol, step, seq_len, seed } => {
            let config: ModelConfig = match config {
                Some(path) => read_json(&path)?,
                None => ModelConfig::default(),
            };
            let params = ModelParams::init_with_std(&config, seed, 0.3)?;
            if seq_len < 2 || seq_len > config.max_seq_len {
                return Err(Error::Config(format!("sequence length {seq_len} must be in [2, {}]", config.max_seq_len)));
            }
            let prompt_len = seq_len / 3;
            let tokens: Vec<usize> = (0..seq_len).map(|i| 2 + (i * 7 + seed as usize) % (config.vocab_size - 2)).collect();
            let batch = [Sequence::new(tokens, prompt_len.max(1), false, config.pad_token)?];
            let report = check_em_gradient(&params, &batch, step)?;
            println!(
                "{} partial derivatives, max relative error {:.3e} ({}[{}])",
                report.checked, report.max_relative_error, report.worst_parameter, report.worst_index
            );
            if report.max_relative_error >= tol {
                return Err(Error::Numeric(format!(
                    "max relative error {:.3e} exceeds tolerance {tol:e}",
                    report.max_relative_error
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
