//! Command-line entry point for the poisoning laboratory: pretraining,
//! attacker training, adversarial training, evaluation matrices, budget
//! sweeps, and summary tables. Every run prints its fully resolved
//! configuration first so the exact experiment can be replayed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atdpt::dpt::victim_runner::train_attacker_for_target;
use atdpt::dpt::{run_adversarial_training, ClassicalVictim, TaskAttackers};
use atdpt::envs::EnvKind;
use atdpt::harness::{
    budget_sweep, pretrain_model, run_evaluation_matrix, sample_task, summarize, summary_to_csv,
    write_atomic, write_records, ExperimentConfig,
};
use atdpt::rng::{substream, tag};
use atdpt::transformer::{load_params, save_params, save_tensors};
use atdpt::{Error, Result};

#[derive(Parser)]
#[command(name = "atdpt", version, about = "Reward-poisoning attacks on in-context RL policies")]
struct Cli {
    /// Experiment configuration file (flat `key = value` text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and CSV files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Apply the reduced single-CPU defaults before config overrides.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Environment family when no config file names one.
    #[arg(long, global = true, default_value = "bandit")]
    env: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining of the in-context policy on clean rollouts.
    Pretrain,
    /// Train per-task attackers against one classical victim.
    TrainAttacker {
        /// Victim id (ts, ucb, rts-tuned, crucb-mod, linucb, q-learning, ...).
        #[arg(long, default_value = "ts")]
        target: String,
    },
    /// Adversarial training: alternate attacker and policy updates.
    AdvTrain,
    /// Fill in the full algorithm × attacker evaluation matrix.
    Evaluate,
    /// Repeat attacker training and evaluation across attack budgets.
    BudgetSweep {
        /// Comma-separated list of budgets B.
        #[arg(long, default_value = "1,3,5")]
        budgets: String,
    },
    /// Aggregate a metrics CSV into mean ± 2×SEM table cells.
    Summarize {
        /// Metrics CSV produced by `evaluate` (defaults to <out>/metrics.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn parse_env(name: &str) -> Result<EnvKind> {
    match name {
        "bandit" => Ok(EnvKind::Bandit),
        "linear" => Ok(EnvKind::LinearBandit),
        "darkroom2" => Ok(EnvKind::Darkroom2),
        other => Err(Error::Config(format!("unknown env `{other}`"))),
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if cli.desk_scale {
                // desk-scale defaults first, then the file's overrides again
                let mut desk = ExperimentConfig::desk_scale(cfg.env);
                desk.seed = cfg.seed;
                let merged = format!("{}{}", desk.to_text(), text);
                cfg = ExperimentConfig::parse(&merged)?;
            }
            cfg
        }
        None => {
            let env = parse_env(&cli.env)?;
            if cli.desk_scale {
                ExperimentConfig::desk_scale(env)
            } else {
                ExperimentConfig::default_for(env)
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn save_attackers(path: &Path, attackers: &TaskAttackers) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    match attackers {
        TaskAttackers::Bandit(list) => {
            for (i, a) in list.iter().enumerate() {
                tensors.push((format!("task{i}.mean_shift"), vec![a.mean_shift.len()], &a.mean_shift));
                tensors.push((format!("task{i}.log_std"), vec![a.log_std.len()], &a.log_std));
            }
        }
        TaskAttackers::Mdp(list) => {
            for (i, a) in list.iter().enumerate() {
                tensors.push((format!("task{i}.logits"), vec![a.logits.len()], &a.logits));
            }
        }
    }
    save_tensors(path, &tensors)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    print!("{}", cfg.to_text());
    std::fs::create_dir_all(&cfg.out_dir)?;

    match &cli.command {
        Command::Pretrain => {
            let model = pretrain_model(&cfg, 0)?;
            let path = out_path(&cfg, "pretrained.ckpt");
            save_params(&path, &model)?;
            println!("wrote {}", path.display());
        }
        Command::TrainAttacker { target } => {
            let victim = ClassicalVictim::parse(target)?;
            let mut task_rng = substream(cfg.seed, &[0, tag::TASK_SAMPLING]);
            let tasks: Vec<_> =
                (0..cfg.num_tasks).map(|_| sample_task(&cfg, &mut task_rng)).collect();
            let attackers = train_attacker_for_target(
                victim,
                &tasks,
                cfg.num_rounds,
                &cfg.attack()?,
                cfg.attacker_lr,
                cfg.seed,
                cfg.tabular_episodes_per_round,
            )?;
            let path = out_path(&cfg, &format!("attacker-{target}.ckpt"));
            save_attackers(&path, &attackers)?;
            println!("wrote {}", path.display());
        }
        Command::AdvTrain => {
            let pretrained_path = out_path(&cfg, "pretrained.ckpt");
            let mut model = match load_params(&pretrained_path, cfg.transformer()) {
                Ok(m) => m,
                Err(Error::MissingCheckpoint(_)) => pretrain_model(&cfg, 0)?,
                Err(e) => return Err(e),
            };
            let mut task_rng = substream(cfg.seed, &[0, tag::TASK_SAMPLING]);
            let tasks: Vec<_> =
                (0..cfg.num_tasks).map(|_| sample_task(&cfg, &mut task_rng)).collect();
            let rc = atdpt::dpt::RoundConfig {
                num_tasks: cfg.num_tasks,
                num_rounds: cfg.num_rounds,
                iterations_per_round: cfg.iterations_per_round,
                attack: cfg.attack()?,
                victim_lr: cfg.victim_lr,
                attacker_lr: cfg.adv_attacker_lr,
                freeze_victim: false,
            };
            let (attackers, curve) = run_adversarial_training(&mut model, &tasks, &rc, cfg.seed)?;
            save_params(&out_path(&cfg, "at_dpt.ckpt"), &model)?;
            save_attackers(&out_path(&cfg, "attacker-at-dpt.ckpt"), &attackers)?;
            let records: Vec<_> = curve
                .iter()
                .map(|rm| atdpt::harness::MetricRecord {
                    env: cfg.env.name().into(),
                    algorithm: "at-dpt".into(),
                    attacker_target: "at-dpt".into(),
                    epsilon: cfg.epsilon,
                    replication: 0,
                    round: Some(rm.round),
                    metric: match cfg.env {
                        EnvKind::Darkroom2 => "episode_reward".into(),
                        _ => "cumulative_regret".into(),
                    },
                    value: match cfg.env {
                        EnvKind::Darkroom2 => rm.mean_clean_return,
                        _ => rm.mean_clean_regret,
                    },
                    poisoned_fraction: rm.mean_poisoned_fraction,
                })
                .collect();
            write_records(&out_path(&cfg, "adv_train_curve.csv"), &records)?;
            println!("wrote {}", out_path(&cfg, "at_dpt.ckpt").display());
        }
        Command::Evaluate => {
            let records = run_evaluation_matrix(&cfg)?;
            let path = out_path(&cfg, "metrics.csv");
            write_records(&path, &records)?;
            println!("wrote {} ({} records)", path.display(), records.len());
        }
        Command::BudgetSweep { budgets } => {
            let budgets: Vec<f64> = budgets
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad budget `{s}`")))
                })
                .collect::<Result<_>>()?;
            if budgets.is_empty() {
                return Err(Error::Config("budget list is empty".into()));
            }
            let records = budget_sweep(&cfg, &budgets)?;
            let path = out_path(&cfg, "budget_curves.csv");
            write_records(&path, &records)?;
            println!("wrote {} ({} records)", path.display(), records.len());
        }
        Command::Summarize { input } => {
            let path = input.clone().unwrap_or_else(|| out_path(&cfg, "metrics.csv"));
            let records = atdpt::harness::read_records(&path)?;
            let cells = summarize(&records);
            let csv = summary_to_csv(&cells);
            write_atomic(&out_path(&cfg, "summary.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
