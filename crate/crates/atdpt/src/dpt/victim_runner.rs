//! Episode runners for the classical victims and attacker training against
//! named targets. Every victim sees only observed (possibly poisoned)
//! rewards; clean values flow exclusively into traces and metrics.

use rand_chacha::ChaCha8Rng;

use super::{AttackPolicy, ClassicalVictim, ContextBuffer, DeployOutcome, EpisodeRngs};
use crate::attackers::{
    poison_coin, reinforce_update_bandit, reinforce_update_mdp, AdaptiveAttacker, AttackConfig,
    EpisodeTrace, PoisonStep,
};
use crate::envs::{cumulative_regret, step, EnvKind, Task};
use crate::victims::{
    npg_episode, q_learning_episode, rts_bound, select_action_linear, BanditPolicy, CrLinUcbConfig,
    CrUcb, CrUcbConfig, ExplorationSchedule, LinUcb, LinUcbConfig, NpgPolicy, QTable, RobustTs,
    RtsRegime, ThompsonSampling, TsConfig, Ucb, UcbConfig,
};
use crate::{Error, Result};

/// Prior width driving the robust confidence radius of crUCB.
const CRUCB_SIGMA0: f64 = 0.2;

/// Victim lifetimes rolled out per attacker update against bandit targets.
const BANDIT_EPISODES_PER_ROUND: usize = 64;

/// Fresh statistics for one episode of a stateful bandit victim.
pub fn make_bandit_victim(
    victim: ClassicalVictim,
    num_arms: usize,
    horizon: usize,
    attack: &AttackConfig,
    corruption_trace: Option<&[f64]>,
) -> Result<Box<dyn BanditPolicy>> {
    Ok(match victim {
        ClassicalVictim::ThompsonSampling => {
            Box::new(ThompsonSampling::new(num_arms, TsConfig::default()))
        }
        ClassicalVictim::Ucb => Box::new(Ucb::new(num_arms, UcbConfig::default())),
        ClassicalVictim::RobustTs(regime) => {
            let bound = rts_bound(regime, horizon, num_arms, corruption_trace)?;
            Box::new(RobustTs::new(num_arms, TsConfig::default(), bound))
        }
        ClassicalVictim::CrUcb(variant) => {
            // The trimmed mean discards 2*ceil(alpha*n) samples in total, so
            // covering a poisoned fraction epsilon needs alpha = epsilon / 2.
            let cfg = CrUcbConfig::new(attack.epsilon / 2.0, CRUCB_SIGMA0, variant);
            Box::new(CrUcb::new(num_arms, cfg))
        }
        other => {
            return Err(Error::Config(format!(
                "{other:?} is not a stateless-context bandit victim"
            )))
        }
    })
}

/// One poisoned episode of a (corruption-robust) linear bandit victim.
/// `attack` carries the corruption level the victim is configured to defend
/// against; `channel_epsilon` is the realized contamination rate (0 for the
/// clean column — robust victims still pay their defensive overhead).
pub fn run_linear_victim_episode(
    victim: ClassicalVictim,
    task: &Task,
    attack_policy: &mut AttackPolicy,
    attack: &AttackConfig,
    channel_epsilon: f64,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let features = match task {
        Task::Linear(t) => &t.features,
        _ => return Err(Error::Config("linear victim needs a linear bandit task".into())),
    };
    let dim = features[0].len();
    let mut state = match victim {
        ClassicalVictim::LinUcb => LinUcb::new(dim, LinUcbConfig::default()),
        ClassicalVictim::CrLinUcb(variant) => {
            let cr = CrLinUcbConfig::from_attack(attack.epsilon, attack.budget, task.horizon(), variant);
            LinUcb::new_robust(dim, LinUcbConfig::default(), cr)
        }
        other => return Err(Error::Config(format!("{other:?} is not a linear victim"))),
    };
    let mut buffer = ContextBuffer::new();
    let mut trace = EpisodeTrace::default();
    let mut actions = Vec::with_capacity(task.horizon());
    attack_policy.begin_episode();
    for h in 1..=task.horizon() {
        let action = select_action_linear(&state, features, h);
        let (clean, next) = step(task, 0, action, &mut rngs.env)?;
        let poisoned = poison_coin(channel_epsilon, &mut rngs.coin);
        let observed =
            attack_policy.observe_step(task, 0, action, clean, poisoned, &mut rngs.attack)?;
        state.observe(&features[action], observed);
        buffer.push(0, action, observed, clean, next, poisoned);
        trace.push(PoisonStep { state: 0, action, delta: observed - clean, poisoned, clean_reward: clean });
        actions.push(action);
    }
    let clean_return = buffer.clean_return();
    let clean_regret = cumulative_regret(task, &actions);
    Ok(DeployOutcome { buffer, trace, actions, clean_regret, clean_return })
}

/// Number of clean warm-up episodes the gridworld victims get before the
/// poisoned episodes the attacker trains and is scored on.
pub const TABULAR_WARMUP_EPISODES: usize = 100;
const Q_LEARNING_RATE: f64 = 0.1;
const Q_DISCOUNT: f64 = 0.99;
const NPG_STEP_SIZE: f64 = 0.5;

enum TabularVictim {
    Q(QTable, ExplorationSchedule),
    Npg(NpgPolicy),
}

impl TabularVictim {
    fn new(victim: ClassicalVictim, num_states: usize, num_actions: usize) -> Result<Self> {
        Ok(match victim {
            ClassicalVictim::QLearning => Self::Q(
                QTable::new(num_states, num_actions, Q_LEARNING_RATE, Q_DISCOUNT),
                ExplorationSchedule::default(),
            ),
            ClassicalVictim::Npg => Self::Npg(NpgPolicy::new(num_states, num_actions)),
            other => return Err(Error::Config(format!("{other:?} is not a tabular victim"))),
        })
    }
}

/// One poisoned episode of a tabular learner (the learner keeps its state
/// across episodes; pass the same victim for a full lifetime).
fn run_tabular_episode(
    victim: &mut TabularVictim,
    episode_index: usize,
    task: &Task,
    attack_policy: &mut AttackPolicy,
    epsilon: f64,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let dr = match task {
        Task::Darkroom(t) => t.clone(),
        _ => return Err(Error::Config("tabular victim needs a gridworld task".into())),
    };
    attack_policy.begin_episode();
    let mut buffer = ContextBuffer::new();
    let mut trace = EpisodeTrace::default();
    // the closure owns the poisoning channel; the learner only ever sees the
    // first (observed) component
    let mut env_rng = rngs.env.clone();
    let mut coin_rng = rngs.coin.clone();
    let mut attack_rng = rngs.attack.clone();
    let mut records: Vec<(usize, usize, f64, f64, usize, bool)> = Vec::new();
    let outcome = {
        let mut step_fn = |state: usize, action: usize, _rng: &mut ChaCha8Rng| {
            let (clean, next) = step(task, state, action, &mut env_rng).expect("valid action");
            let poisoned = poison_coin(epsilon, &mut coin_rng);
            let observed = attack_policy
                .observe_step(task, state, action, clean, poisoned, &mut attack_rng)
                .expect("attack channel");
            records.push((state, action, observed, clean, next, poisoned));
            (observed, clean, next)
        };
        match victim {
            TabularVictim::Q(q, schedule) => {
                let explore = schedule.epsilon(episode_index);
                q_learning_episode(q, &dr, explore, &mut rngs.policy, &mut step_fn)
            }
            TabularVictim::Npg(policy) => {
                npg_episode(policy, &dr, NPG_STEP_SIZE, &mut rngs.policy, &mut step_fn)
            }
        }
    };
    rngs.env = env_rng;
    rngs.coin = coin_rng;
    rngs.attack = attack_rng;
    for (state, action, observed, clean, next, poisoned) in records {
        buffer.push(state, action, observed, clean, next, poisoned);
        trace.push(PoisonStep { state, action, delta: observed - clean, poisoned, clean_reward: clean });
    }
    Ok(DeployOutcome {
        buffer,
        trace,
        actions: outcome.actions,
        clean_regret: 0.0,
        clean_return: outcome.clean_return,
    })
}

/// Per-task attackers trained against a named classical victim. The victim
/// is re-initialized at every round; tabular victims additionally get their
/// clean warm-up episodes before the scored, poisoned part of each round.
#[allow(clippy::too_many_arguments)]
pub fn train_attacker_for_target(
    victim: ClassicalVictim,
    tasks: &[Task],
    rounds: usize,
    attack: &AttackConfig,
    attacker_lr: f64,
    seed: u64,
    tabular_episodes_per_round: usize,
) -> Result<super::TaskAttackers> {
    let mut attackers = super::TaskAttackers::init(tasks);
    for round in 0..rounds {
        for (i, task) in tasks.iter().enumerate() {
            let mut policy = attackers.policy_for(i);
            let mut rngs = EpisodeRngs::new(seed, &[round as u64, i as u64]);
            match (task.kind(), &mut attackers) {
                (EnvKind::Darkroom2, super::TaskAttackers::Mdp(list)) => {
                    let mut learner = TabularVictim::new(victim, task.num_states(), task.num_actions())?;
                    // clean warm-up: the learner explores without the attacker
                    let mut clean = AttackPolicy::None;
                    for ep in 0..TABULAR_WARMUP_EPISODES {
                        run_tabular_episode(&mut learner, ep, task, &mut clean, 0.0, &mut rngs)?;
                    }
                    for ep in 0..tabular_episodes_per_round {
                        let out = run_tabular_episode(
                            &mut learner,
                            TABULAR_WARMUP_EPISODES + ep,
                            task,
                            &mut policy,
                            attack.epsilon,
                            &mut rngs,
                        )?;
                        reinforce_update_mdp(
                            &mut list[i],
                            std::slice::from_ref(&out.trace),
                            attack,
                            attacker_lr,
                        );
                        policy = AttackPolicy::Mdp(list[i].clone());
                    }
                }
                (_, super::TaskAttackers::Bandit(list)) => {
                    // a small batch of independent victim lifetimes per update
                    // cuts the score-function estimator's variance
                    let mut traces = Vec::with_capacity(BANDIT_EPISODES_PER_ROUND);
                    for ep in 0..BANDIT_EPISODES_PER_ROUND {
                        let mut ep_rngs =
                            EpisodeRngs::new(seed, &[round as u64, i as u64, ep as u64]);
                        let out = run_victim_bandit_round(
                            victim,
                            task,
                            &mut policy,
                            attack,
                            attack.epsilon,
                            &mut ep_rngs,
                        )?;
                        traces.push(out.trace);
                    }
                    reinforce_update_bandit(&mut list[i], &traces, attack, attacker_lr);
                }
                _ => return Err(Error::Config("attacker family does not match the tasks".into())),
            }
        }
    }
    Ok(attackers)
}

/// Evaluate a tabular victim's lifetime under a frozen attack policy: clean
/// warm-up, then `episodes` poisoned episodes; returns the last episode.
pub fn run_tabular_victim_eval(
    victim: ClassicalVictim,
    task: &Task,
    attack_policy: &mut AttackPolicy,
    epsilon: f64,
    episodes: usize,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let mut learner = TabularVictim::new(victim, task.num_states(), task.num_actions())?;
    let mut clean = AttackPolicy::None;
    for ep in 0..TABULAR_WARMUP_EPISODES {
        run_tabular_episode(&mut learner, ep, task, &mut clean, 0.0, rngs)?;
    }
    let mut last = None;
    for ep in 0..episodes.max(1) {
        last = Some(run_tabular_episode(
            &mut learner,
            TABULAR_WARMUP_EPISODES + ep,
            task,
            attack_policy,
            epsilon,
            rngs,
        )?);
    }
    Ok(last.expect("at least one episode"))
}

/// One fresh-victim poisoned episode for any bandit-family victim. The
/// victim defends against `attack`'s corruption level; the channel poisons
/// `channel_epsilon` of the steps.
pub fn run_victim_bandit_round(
    victim: ClassicalVictim,
    task: &Task,
    attack_policy: &mut AttackPolicy,
    attack: &AttackConfig,
    channel_epsilon: f64,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    match victim {
        ClassicalVictim::LinUcb | ClassicalVictim::CrLinUcb(_) => {
            run_linear_victim_episode(victim, task, attack_policy, attack, channel_epsilon, rngs)
        }
        _ => {
            // the known regime assumes the nominal per-step corruption
            // magnitude ε·B over the whole horizon
            let nominal_trace;
            let trace = if matches!(victim, ClassicalVictim::RobustTs(RtsRegime::Known)) {
                nominal_trace = vec![attack.epsilon * attack.budget; task.horizon()];
                Some(nominal_trace.as_slice())
            } else {
                None
            };
            let mut policy =
                make_bandit_victim(victim, task.num_actions(), task.horizon(), attack, trace)?;
            super::run_bandit_victim_episode(policy.as_mut(), task, attack_policy, channel_epsilon, rngs)
        }
    }
}

/// Train an adaptive (context-conditioned) attacker against a classical
/// bandit victim. Each round spends the same per-task episode budget as the
/// non-adaptive attacker training (`BANDIT_EPISODES_PER_ROUND` victim
/// lifetimes), with one REINFORCE step after every episode; the running
/// baseline inside the attacker plays the role of the batch average.
pub fn train_adaptive_attacker(
    mut attacker: AdaptiveAttacker,
    victim: ClassicalVictim,
    tasks: &[Task],
    rounds: usize,
    attack: &AttackConfig,
    attacker_lr: f64,
    seed: u64,
) -> Result<AdaptiveAttacker> {
    for round in 0..rounds {
        for (i, task) in tasks.iter().enumerate() {
            for ep in 0..BANDIT_EPISODES_PER_ROUND {
                let mut rngs = EpisodeRngs::new(seed, &[round as u64, i as u64, ep as u64]);
                let mut holder = AttackPolicy::Adaptive(Box::new(attacker));
                let out =
                    run_victim_bandit_round(victim, task, &mut holder, attack, attack.epsilon, &mut rngs)?;
                attacker = match holder {
                    AttackPolicy::Adaptive(a) => *a,
                    _ => unreachable!(),
                };
                attacker.reinforce_update_adaptive(task, &out.trace, attack, attacker_lr)?;
            }
        }
    }
    Ok(attacker)
}

/// Bandit attackers evaluated per task: build the frozen policies.
pub fn bandit_attack_policies(attackers: &super::TaskAttackers) -> Vec<AttackPolicy> {
    match attackers {
        super::TaskAttackers::Bandit(v) => {
            v.iter().map(|a| AttackPolicy::Bandit(a.clone())).collect()
        }
        super::TaskAttackers::Mdp(v) => v.iter().map(|a| AttackPolicy::Mdp(a.clone())).collect(),
    }
}

pub use super::TaskAttackers;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_bandit_task, sample_darkroom2_task};
    use crate::rng::substream;

    #[test]
    fn bandit_victims_construct_and_run() {
        let mut rng = substream(300, &[]);
        let task = Task::Bandit(sample_bandit_task(5, 60, &mut rng));
        let attack = AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap();
        for victim in [
            ClassicalVictim::ThompsonSampling,
            ClassicalVictim::Ucb,
            ClassicalVictim::RobustTs(RtsRegime::Tuned),
            ClassicalVictim::RobustTs(RtsRegime::Unknown),
            ClassicalVictim::CrUcb(crate::victims::CrUcbVariant::Modified),
        ] {
            let mut rngs = EpisodeRngs::new(1, &[0]);
            let mut policy = AttackPolicy::None;
            let out = run_victim_bandit_round(victim, &task, &mut policy, &attack, 0.0, &mut rngs).unwrap();
            assert_eq!(out.actions.len(), 60);
            assert!(out.clean_regret.is_finite());
        }
        // known regime without a trace is an error
        assert!(make_bandit_victim(
            ClassicalVictim::RobustTs(RtsRegime::Known),
            5,
            60,
            &attack,
            None
        )
        .is_err());
    }

    #[test]
    fn linear_victims_run_and_robust_width_changes_behavior() {
        let mut rng = substream(301, &[]);
        let features = crate::envs::sample_linear_features(5, 4, &mut rng);
        let task = Task::Linear(crate::envs::sample_linear_task(&features, 80, &mut rng));
        let attack = AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap();
        for victim in [
            ClassicalVictim::LinUcb,
            ClassicalVictim::CrLinUcb(crate::victims::CrLinUcbVariant::V2),
            ClassicalVictim::CrLinUcb(crate::victims::CrLinUcbVariant::V3),
        ] {
            let mut rngs = EpisodeRngs::new(2, &[0]);
            let mut policy = AttackPolicy::None;
            let out = run_linear_victim_episode(victim, &task, &mut policy, &attack, 0.0, &mut rngs).unwrap();
            assert_eq!(out.actions.len(), 80);
        }
    }

    #[test]
    fn tabular_attacker_training_runs_and_moves_logits() {
        let mut rng = substream(302, &[]);
        let task = Task::Darkroom(sample_darkroom2_task(5, 40, &mut rng));
        let attack = AttackConfig::new(0.4, 10.0, 1.0, 10.0).unwrap();
        let attackers = train_attacker_for_target(
            ClassicalVictim::QLearning,
            std::slice::from_ref(&task),
            1,
            &attack,
            0.05,
            7,
            3,
        )
        .unwrap();
        match attackers {
            TaskAttackers::Mdp(list) => {
                assert_eq!(list.len(), 1);
                // at least one logit moved after the poisoned episodes
                assert!(list[0].logits.iter().any(|&l| l != 0.0));
            }
            _ => panic!("expected gridworld attackers"),
        }
    }

    #[test]
    fn bandit_attacker_training_is_deterministic() {
        let mut rng = substream(303, &[]);
        let tasks: Vec<Task> =
            (0..3).map(|_| Task::Bandit(sample_bandit_task(5, 50, &mut rng))).collect();
        let attack = AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap();
        let run = || {
            train_attacker_for_target(
                ClassicalVictim::ThompsonSampling,
                &tasks,
                4,
                &attack,
                0.03,
                11,
                0,
            )
            .unwrap()
        };
        match (run(), run()) {
            (TaskAttackers::Bandit(a), TaskAttackers::Bandit(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    assert_eq!(x.mean_shift, y.mean_shift);
                    assert_eq!(x.log_std, y.log_std);
                }
            }
            _ => panic!("expected bandit attackers"),
        }
    }
}
