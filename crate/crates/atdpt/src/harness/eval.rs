//! Evaluation matrices (algorithm rows × attacker-target columns), cross-seed
//! pairing for the adversarially trained policy, and budget sweeps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::config::ExperimentConfig;
use super::metrics::MetricRecord;
use crate::attackers::uniform_random_attack;
use crate::dpt::victim_runner::{run_victim_bandit_round, train_attacker_for_target};
use crate::dpt::{
    deploy_in_context, deploy_in_context_lifetime, generate_pretrain_dataset, pretrain,
    run_adversarial_training,
    AttackPolicy, ClassicalVictim, EpisodeRngs, RoundConfig, RoundMetrics, TaskAttackers,
};
use crate::envs::{
    sample_bandit_task, sample_darkroom2_task, sample_linear_features, sample_linear_task,
    EnvKind, Task,
};
use crate::rng::{substream, tag};
use crate::transformer::ModelParams;
use crate::{Error, Result};

/// A table row: a classical victim or one of the transformer policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Classical(ClassicalVictim),
    /// Pretrained policy, frozen after the clean pretraining phase.
    Dpt,
    /// Policy fine-tuned in the adversarial loop.
    AtDpt,
}

impl Algorithm {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dpt" => Ok(Self::Dpt),
            "at-dpt" => Ok(Self::AtDpt),
            other => Ok(Self::Classical(ClassicalVictim::parse(other)?)),
        }
    }
}

/// A table column: the attacker sitting on the reward channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackColumn {
    /// No contamination at all (ε treated as 0).
    Clean,
    /// Frozen uniform-random mean shift, clipped to the budget.
    Uniform,
    /// Attacker trained against the named victim ("ts", "dpt", "at-dpt", ...).
    Trained(String),
}

impl AttackColumn {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "clean" => Self::Clean,
            "uniform" => Self::Uniform,
            other => {
                Algorithm::parse(other)?; // must name a known victim
                Self::Trained(other.to_string())
            }
        })
    }

    fn label(&self) -> String {
        match self {
            Self::Clean => "clean".into(),
            Self::Uniform => "uniform".into(),
            Self::Trained(name) => name.clone(),
        }
    }
}

/// Sample one task of the configured family.
pub fn sample_task(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Task {
    match cfg.env {
        EnvKind::Bandit => Task::Bandit(sample_bandit_task(cfg.num_arms, cfg.horizon, rng)),
        EnvKind::LinearBandit => {
            let features = sample_linear_features(cfg.num_arms, cfg.feature_dim, rng);
            Task::Linear(sample_linear_task(&features, cfg.horizon, rng))
        }
        EnvKind::Darkroom2 => Task::Darkroom(sample_darkroom2_task(cfg.grid_side, cfg.horizon, rng)),
    }
}

/// Everything one replication trains before the matrix is filled in.
pub struct ReplicationArtifacts {
    pub tasks: Vec<Task>,
    pub pretrained: Option<ModelParams>,
    pub at_dpt: Option<ModelParams>,
    /// Per-round curve of the adversarial run (for plots/criteria).
    pub at_dpt_curve: Vec<RoundMetrics>,
    /// Attackers per trained target column, aligned with `tasks`.
    pub attackers: BTreeMap<String, TaskAttackers>,
    /// Frozen uniform shift per task.
    pub uniform: Vec<Vec<f64>>,
}

fn needs_model(cfg: &ExperimentConfig) -> bool {
    cfg.algorithms.iter().any(|a| a == "dpt" || a == "at-dpt")
        || cfg.attacker_targets.iter().any(|a| a == "dpt" || a == "at-dpt")
}

/// Clean pretraining of the in-context policy for one replication seed.
pub fn pretrain_model(cfg: &ExperimentConfig, rep: u64) -> Result<ModelParams> {
    let mut init_rng = substream(cfg.seed, &[rep, tag::MODEL_INIT]);
    let mut model = ModelParams::init(cfg.transformer(), &mut init_rng);
    let mut data_rng = substream(cfg.seed, &[rep, tag::PRETRAIN]);
    let mut sampler = |rng: &mut ChaCha8Rng| sample_task(cfg, rng);
    let samples = generate_pretrain_dataset(&mut sampler, cfg.pretrain_samples, &mut data_rng)?;
    let mut train_rng = substream(cfg.seed, &[rep, tag::SUPERVISED]);
    pretrain(
        &mut model,
        &samples,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        cfg.pretrain_batch,
        &mut train_rng,
    )?;
    Ok(model)
}

fn round_config(cfg: &ExperimentConfig, freeze_victim: bool) -> Result<RoundConfig> {
    Ok(RoundConfig {
        num_tasks: cfg.num_tasks,
        num_rounds: cfg.num_rounds,
        iterations_per_round: cfg.iterations_per_round,
        attack: cfg.attack()?,
        victim_lr: cfg.victim_lr,
        attacker_lr: cfg.adv_attacker_lr,
        freeze_victim,
    })
}

/// Train every artifact one replication needs: tasks, models, attackers.
pub fn build_replication(cfg: &ExperimentConfig, rep: usize) -> Result<ReplicationArtifacts> {
    let rep_u = rep as u64;
    let mut task_rng = substream(cfg.seed, &[rep_u, tag::TASK_SAMPLING]);
    let tasks: Vec<Task> = (0..cfg.num_tasks).map(|_| sample_task(cfg, &mut task_rng)).collect();

    let pretrained = if needs_model(cfg) { Some(pretrain_model(cfg, rep_u)?) } else { None };

    let mut at_dpt = None;
    let mut at_dpt_curve = Vec::new();
    let mut attackers: BTreeMap<String, TaskAttackers> = BTreeMap::new();
    let attack = cfg.attack()?;

    for target in &cfg.attacker_targets {
        match AttackColumn::parse(target)? {
            AttackColumn::Clean | AttackColumn::Uniform => {}
            AttackColumn::Trained(name) => match Algorithm::parse(&name)? {
                Algorithm::AtDpt => {
                    let mut model =
                        pretrained.clone().ok_or_else(|| Error::Config("at-dpt target requires the pretrained model".into()))?;
                    let rc = round_config(cfg, false)?;
                    let seed = substream_seed(cfg.seed, rep_u, tag::ATTACKER_UPDATE);
                    let (trained, curve) = run_adversarial_training(&mut model, &tasks, &rc, seed)?;
                    at_dpt = Some(model);
                    at_dpt_curve = curve;
                    attackers.insert(name, trained);
                }
                Algorithm::Dpt => {
                    let mut model =
                        pretrained.clone().ok_or_else(|| Error::Config("dpt target requires the pretrained model".into()))?;
                    let rc = round_config(cfg, true)?;
                    let seed = substream_seed(cfg.seed, rep_u, tag::ATTACKER_INIT);
                    let (trained, _) = run_adversarial_training(&mut model, &tasks, &rc, seed)?;
                    attackers.insert(name, trained);
                }
                Algorithm::Classical(victim) => {
                    let seed = substream_seed(cfg.seed, rep_u, tag::ATTACKER_UPDATE ^ 0x200);
                    let trained = train_attacker_for_target(
                        victim,
                        &tasks,
                        cfg.num_rounds,
                        &attack,
                        cfg.attacker_lr,
                        seed,
                        cfg.tabular_episodes_per_round,
                    )?;
                    attackers.insert(name, trained);
                }
            },
        }
    }

    // the at-dpt row needs its model even when no at-dpt column was asked for
    if at_dpt.is_none() && cfg.algorithms.iter().any(|a| a == "at-dpt") {
        let mut model = pretrained
            .clone()
            .ok_or_else(|| Error::Config("at-dpt row requires the pretrained model".into()))?;
        let rc = round_config(cfg, false)?;
        let seed = substream_seed(cfg.seed, rep_u, tag::ATTACKER_UPDATE);
        let (_, curve) = run_adversarial_training(&mut model, &tasks, &rc, seed)?;
        at_dpt = Some(model);
        at_dpt_curve = curve;
    }

    let mut uniform_rng = substream(cfg.seed, &[rep_u, tag::UNIFORM_ATTACK]);
    let uniform = tasks
        .iter()
        .map(|t| {
            let n = match t.kind() {
                EnvKind::Bandit | EnvKind::LinearBandit => t.num_actions(),
                EnvKind::Darkroom2 => t.num_states() * t.num_actions(),
            };
            uniform_random_attack(n, cfg.budget, &mut uniform_rng)
        })
        .collect();

    Ok(ReplicationArtifacts { tasks, pretrained, at_dpt, at_dpt_curve, attackers, uniform })
}

/// Derive a scalar seed for a nested run from stable indices.
fn substream_seed(seed: u64, rep: u64, stream: u64) -> u64 {
    substream(seed, &[rep, stream]).gen::<u64>()
}

struct CellOutcome {
    mean_value: f64,
    mean_poisoned: f64,
}

/// Evaluate one algorithm on one task set under per-task attack policies.
/// `model_src` carries the (possibly cross-seed) transformer weights.
#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    model: Option<&ModelParams>,
    tasks: &[Task],
    mut policy_for: impl FnMut(usize) -> AttackPolicy,
    epsilon: f64,
    rep: u64,
    column_ix: u64,
    alg_ix: u64,
) -> Result<CellOutcome> {
    let attack = cfg.attack()?;
    let mut value_sum = 0.0;
    let mut poisoned_sum = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let mut rngs = EpisodeRngs::new(cfg.seed, &[tag::QUERY, rep, alg_ix, column_ix, i as u64]);
        let mut policy = policy_for(i);
        let outcome = match algorithm {
            Algorithm::Classical(victim) => match task.kind() {
                EnvKind::Darkroom2 => crate::dpt::victim_runner::run_tabular_victim_eval(
                    victim,
                    task,
                    &mut policy,
                    epsilon,
                    cfg.tabular_episodes_per_round,
                    &mut rngs,
                )?,
                _ => run_victim_bandit_round(victim, task, &mut policy, &attack, epsilon, &mut rngs)?,
            },
            Algorithm::Dpt | Algorithm::AtDpt => {
                let model = model.ok_or_else(|| {
                    Error::MissingCheckpoint("transformer weights for dpt/at-dpt row".into())
                })?;
                match task.kind() {
                    // Gridworld rows get a multi-episode in-context lifetime
                    // (final episode scored) to match the warm-up the tabular
                    // victims receive; bandit rows stay single-episode because
                    // the classical bandit baselines get no warm-up either.
                    EnvKind::Darkroom2 => deploy_in_context_lifetime(
                        model,
                        task,
                        &mut policy,
                        epsilon,
                        cfg.eval_episodes,
                        false,
                        &mut rngs,
                    )?,
                    _ => deploy_in_context(model, task, &mut policy, epsilon, false, &mut rngs)?,
                }
            }
        };
        value_sum += match task.kind() {
            EnvKind::Darkroom2 => outcome.clean_return,
            _ => outcome.clean_regret,
        };
        poisoned_sum += outcome.buffer.poisoned_fraction();
    }
    let n = tasks.len() as f64;
    Ok(CellOutcome { mean_value: value_sum / n, mean_poisoned: poisoned_sum / n })
}

fn metric_name(env: EnvKind) -> &'static str {
    match env {
        EnvKind::Darkroom2 => "episode_reward",
        _ => "cumulative_regret",
    }
}

/// Fill in the full matrix: one record per (algorithm, column, replication),
/// plus per-round curve records for the adversarial training runs.
pub fn run_evaluation_matrix(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let reps: Vec<ReplicationArtifacts> =
        (0..cfg.replications).map(|r| build_replication(cfg, r)).collect::<Result<_>>()?;

    let mut records = Vec::new();
    let env_name = cfg.env.name().to_string();
    let metric = metric_name(cfg.env).to_string();

    // columns: clean and uniform baselines first, then the trained targets
    let mut columns = vec![AttackColumn::Clean, AttackColumn::Uniform];
    for t in &cfg.attacker_targets {
        let col = AttackColumn::parse(t)?;
        if !columns.contains(&col) {
            columns.push(col);
        }
    }

    for (rep, art) in reps.iter().enumerate() {
        for (alg_ix, alg_name) in cfg.algorithms.iter().enumerate() {
            let algorithm = Algorithm::parse(alg_name)?;
            for (col_ix, column) in columns.iter().enumerate() {
                // cross-seed pairing: the adversarially trained policy is
                // evaluated on the task set and attackers of the next
                // replication so it never faces its own training attacker
                let (art_eval, model, rep_model) = match (algorithm, column) {
                    (Algorithm::AtDpt, AttackColumn::Trained(name)) if name == "at-dpt" => {
                        let other = (rep + 1) % reps.len();
                        (&reps[other], reps[rep].at_dpt.as_ref(), rep)
                    }
                    (Algorithm::AtDpt, _) => (art, art.at_dpt.as_ref(), rep),
                    (Algorithm::Dpt, _) => (art, art.pretrained.as_ref(), rep),
                    _ => (art, None, rep),
                };
                let _ = rep_model;
                let epsilon = match column {
                    AttackColumn::Clean => 0.0,
                    _ => cfg.epsilon,
                };
                let trained = match column {
                    AttackColumn::Trained(name) => Some(art_eval.attackers.get(name).ok_or_else(
                        || Error::MissingCheckpoint(format!("trained attacker `{name}`")),
                    )?),
                    _ => None,
                };
                let outcome = evaluate_cell(
                    cfg,
                    algorithm,
                    model,
                    &art_eval.tasks,
                    |i| match column {
                        AttackColumn::Clean => AttackPolicy::None,
                        AttackColumn::Uniform => {
                            AttackPolicy::Uniform(art_eval.uniform[i].clone())
                        }
                        AttackColumn::Trained(_) => trained.unwrap().policy_for(i),
                    },
                    epsilon,
                    rep as u64,
                    col_ix as u64,
                    alg_ix as u64,
                )?;
                records.push(MetricRecord {
                    env: env_name.clone(),
                    algorithm: alg_name.clone(),
                    attacker_target: column.label(),
                    epsilon,
                    replication: rep,
                    round: None,
                    metric: metric.clone(),
                    value: outcome.mean_value,
                    poisoned_fraction: outcome.mean_poisoned,
                });
            }
        }
        // per-round curves of the adversarial run
        for rm in &art.at_dpt_curve {
            records.push(MetricRecord {
                env: env_name.clone(),
                algorithm: "at-dpt".into(),
                attacker_target: "at-dpt".into(),
                epsilon: cfg.epsilon,
                replication: rep,
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
            });
        }
    }
    Ok(records)
}

/// Repeat attacker training against the frozen pretrained policy for each
/// budget and emit one per-round curve per (budget, algorithm).
pub fn budget_sweep(cfg: &ExperimentConfig, budgets: &[f64]) -> Result<Vec<MetricRecord>> {
    assert!(!budgets.is_empty());
    let mut records = Vec::new();
    for &budget in budgets {
        let mut swept = cfg.clone();
        swept.budget = budget;
        swept.validate()?;
        for rep in 0..swept.replications {
            let rep_u = rep as u64;
            let mut task_rng = substream(swept.seed, &[rep_u, tag::TASK_SAMPLING]);
            let tasks: Vec<Task> =
                (0..swept.num_tasks).map(|_| sample_task(&swept, &mut task_rng)).collect();
            let mut model = pretrain_model(&swept, rep_u)?;
            let rc = round_config(&swept, true)?;
            let seed = substream_seed(swept.seed, rep_u, tag::ATTACKER_INIT);
            let (_, curve) = run_adversarial_training(&mut model, &tasks, &rc, seed)?;
            for rm in &curve {
                records.push(MetricRecord {
                    env: swept.env.name().into(),
                    algorithm: "dpt".into(),
                    attacker_target: format!("dpt-b{budget}"),
                    epsilon: swept.epsilon,
                    replication: rep,
                    round: Some(rm.round),
                    metric: metric_name(swept.env).into(),
                    value: match swept.env {
                        EnvKind::Darkroom2 => rm.mean_clean_return,
                        _ => rm.mean_clean_regret,
                    },
                    poisoned_fraction: rm.mean_poisoned_fraction,
                });
            }
        }
    }
    Ok(records)
}
