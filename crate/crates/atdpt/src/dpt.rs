//! The three-phase protocol: supervised pretraining of the in-context
//! policy, the adversarial training loop, and in-context deployment under
//! reward poisoning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attackers::{
    attack_reward_bandit, attack_reward_mdp, poison_coin, reinforce_update_bandit,
    reinforce_update_mdp, AdaptiveAttacker, AttackConfig, BanditAttacker, EpisodeTrace,
    MdpAttacker, PoisonStep,
};
use crate::envs::{cumulative_regret, optimal_action, step, EnvKind, Task};
use crate::rng::{substream, tag};
use crate::transformer::{
    backward, encode_context, encode_entry, encode_query, forward, nll_loss, AdamState,
    ContextEntry, InferenceState, ModelParams, TokenBatch,
};
use crate::victims::BanditPolicy;
use crate::{Error, Result};

/// Global gradient-norm cap for every transformer update (pretraining and
/// adversarial rounds); keeps poisoned-context updates from diverging.
const GRAD_CLIP_NORM: f64 = 1.0;

/// One supervised pretraining example: a clean interaction context, a query
/// state, and the oracle action for that query.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub task: Task,
    pub context: Vec<ContextEntry>,
    pub query_state: usize,
    pub optimal_action: usize,
}

/// Twin views of one episode. The victim view carries only observed rewards;
/// clean rewards and poisoned flags are reachable exclusively through the
/// attacker-side accessors.
#[derive(Debug, Clone, Default)]
pub struct ContextBuffer {
    victim: Vec<ContextEntry>,
    attacker: Vec<ContextEntry>,
    poisoned: Vec<bool>,
}

impl ContextBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        state: usize,
        action: usize,
        observed_reward: f64,
        clean_reward: f64,
        next_state: usize,
        poisoned: bool,
    ) {
        self.victim.push(ContextEntry { state, action, reward: observed_reward, next_state });
        self.attacker.push(ContextEntry { state, action, reward: clean_reward, next_state });
        self.poisoned.push(poisoned);
    }

    pub fn len(&self) -> usize {
        self.victim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.victim.is_empty()
    }

    /// What the victim is allowed to condition on.
    pub fn victim_view(&self) -> &[ContextEntry] {
        &self.victim
    }

    /// Clean-reward view, for the attacker and for metrics only.
    pub fn attacker_view(&self) -> &[ContextEntry] {
        &self.attacker
    }

    pub fn poisoned_fraction(&self) -> f64 {
        if self.poisoned.is_empty() {
            return 0.0;
        }
        self.poisoned.iter().filter(|&&p| p).count() as f64 / self.poisoned.len() as f64
    }

    pub fn clean_return(&self) -> f64 {
        self.attacker.iter().map(|e| e.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    /// Tasks (and per-task attackers) per adversarial run (M).
    pub num_tasks: usize,
    /// Adversarial rounds (N).
    pub num_rounds: usize,
    /// Victim optimizer steps per round on the round's fixed dataset.
    pub iterations_per_round: usize,
    pub attack: AttackConfig,
    pub victim_lr: f64,
    pub attacker_lr: f64,
    /// Train attackers only, leaving the victim untouched (frozen baseline).
    pub freeze_victim: bool,
}

// ---------------------------------------------------------------------------
// Episode RNG plumbing
// ---------------------------------------------------------------------------

/// Independent substreams for one episode. The contamination coin gets its
/// own stream so the poisoned-step pattern never depends on how many draws
/// the policy or attacker consumed.
pub struct EpisodeRngs {
    pub env: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub coin: ChaCha8Rng,
    pub attack: ChaCha8Rng,
}

impl EpisodeRngs {
    pub fn new(seed: u64, indices: &[u64]) -> Self {
        let sub = |stream: u64| {
            let mut ix = indices.to_vec();
            ix.push(stream);
            substream(seed, &ix)
        };
        Self {
            env: sub(tag::ROLLOUT),
            policy: sub(tag::VICTIM),
            coin: sub(tag::ROLLOUT ^ 0x100),
            attack: sub(tag::ATTACKER_UPDATE),
        }
    }
}

// ---------------------------------------------------------------------------
// Attack policies
// ---------------------------------------------------------------------------

/// Everything that can sit on the reward channel during deployment.
pub enum AttackPolicy {
    None,
    /// Frozen additive mean-shift, indexed by arm (bandits) or by
    /// `state * |A| + action` (gridworld).
    Uniform(Vec<f64>),
    Bandit(BanditAttacker),
    Mdp(MdpAttacker),
    Adaptive(Box<AdaptiveAttacker>),
}

impl AttackPolicy {
    pub fn begin_episode(&mut self) {
        if let AttackPolicy::Adaptive(a) = self {
            a.begin_episode();
        }
    }

    /// Observed reward for one step. `poisoned` is the pre-drawn coin; the
    /// adaptive attacker must see every step to maintain its context.
    pub fn observe_step(
        &mut self,
        task: &Task,
        state: usize,
        action: usize,
        clean_reward: f64,
        poisoned: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if let AttackPolicy::Adaptive(a) = self {
            return a.attack_reward_adaptive(task, state, action, clean_reward, poisoned, rng);
        }
        if !poisoned {
            return Ok(clean_reward);
        }
        Ok(match self {
            AttackPolicy::None => clean_reward,
            AttackPolicy::Uniform(phi) => {
                let group = match task.kind() {
                    EnvKind::Darkroom2 => state * task.num_actions() + action,
                    _ => action,
                };
                clean_reward + phi[group]
            }
            AttackPolicy::Bandit(a) => attack_reward_bandit(a, action, clean_reward, rng),
            AttackPolicy::Mdp(a) => attack_reward_mdp(a, state, action, clean_reward, rng),
            AttackPolicy::Adaptive(_) => unreachable!(),
        })
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Collect clean random-interaction contexts with oracle labels.
///
pub fn generate_pretrain_dataset(
    sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> Task,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainSample>> {
    assert!(count >= 1);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let task = sampler(rng);
        let mut state = task.start_state();
        let mut context = Vec::with_capacity(task.horizon());
        for _ in 0..task.horizon() {
            let action = rng.gen_range(0..task.num_actions());
            let (clean, next) = step(&task, state, action, rng)?;
            context.push(ContextEntry { state, action, reward: clean, next_state: next });
            state = next;
        }
        let query_state = match task.kind() {
            EnvKind::Bandit | EnvKind::LinearBandit => 0,
            EnvKind::Darkroom2 => rng.gen_range(0..task.num_states()),
        };
        let label = optimal_action(&task, query_state);
        samples.push(PretrainSample { task, context, query_state, optimal_action: label });
    }
    Ok(samples)
}

fn encode_sample(sample: &PretrainSample) -> TokenBatch {
    let seq = encode_context(&sample.task, sample.query_state, &sample.context);
    TokenBatch::with_uniform_target(seq, sample.optimal_action)
}

/// Supervised pretraining: minimize the NLL of oracle actions over shuffled
/// minibatches. Returns the per-epoch mean loss trace.
pub fn pretrain(
    model: &mut ModelParams,
    samples: &[PretrainSample],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert!(!samples.is_empty() && batch_size >= 1);
    let encoded: Vec<TokenBatch> = samples.iter().map(encode_sample).collect();
    let mut optimizer = AdamState::new(model);
    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut grads = ModelParams::zeros_like(model.cfg);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let b = &encoded[i];
                let cache = forward(model, &b.seq.data, b.seq.len)?;
                let (loss, dlogits) =
                    nll_loss(&cache.logits, &b.targets, &b.mask, model.cfg.output_width)?;
                backward(model, &cache, &dlogits, &mut grads);
                batch_loss += loss;
            }
            grads.scale(1.0 / chunk.len() as f64);
            grads.clip_global_norm(GRAD_CLIP_NORM);
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite("pretraining loss"));
            }
            if !crate::transformer::optimizer_step(model, &grads, &mut optimizer, learning_rate) {
                return Err(Error::NonFinite("pretraining gradients"));
            }
            epoch_loss += batch_loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("pretraining epoch loss"));
        }
        trace.push(mean);
        let _ = epoch;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Deployment (in-context test phase)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DeployOutcome {
    pub buffer: ContextBuffer,
    pub trace: EpisodeTrace,
    pub actions: Vec<usize>,
    /// Cumulative clean-reward regret (bandits) — 0 for gridworld tasks.
    pub clean_regret: f64,
    /// Clean episode return.
    pub clean_return: f64,
}

fn sample_from_logits(logits: &[f64], greedy: bool, rng: &mut ChaCha8Rng) -> usize {
    if greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

/// Run one poisoned in-context episode: empty context, per-step action
/// sampling from the transformer conditioned on the victim view, rewards
/// passed through the contamination channel.
pub fn deploy_in_context(
    model: &ModelParams,
    task: &Task,
    attack: &mut AttackPolicy,
    epsilon: f64,
    greedy: bool,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let horizon = task.horizon();
    if model.cfg.context_capacity < horizon {
        return Err(Error::ContextOverflow { len: horizon, capacity: model.cfg.context_capacity });
    }
    let fixed_query = !matches!(task.kind(), EnvKind::Darkroom2);
    let mut buffer = ContextBuffer::new();
    let mut trace = EpisodeTrace::default();
    let mut actions = Vec::with_capacity(horizon);
    let mut state = task.start_state();
    attack.begin_episode();

    // bandit-style tasks have a constant query token, so the incremental
    // KV cache stays valid across the whole episode
    let mut inference = InferenceState::new(&model.cfg);
    let mut last_logits = if fixed_query {
        inference.step(model, &encode_query(task, 0))?
    } else {
        Vec::new()
    };

    for _h in 0..horizon {
        let logits = if fixed_query {
            last_logits.clone()
        } else {
            // query token depends on the current state: recompute the
            // sequence [query(s_h), context...] for this step
            let seq = encode_context(task, state, buffer.victim_view());
            let cache = forward(model, &seq.data, seq.len)?;
            cache.logits_at(seq.len - 1, model.cfg.output_width).to_vec()
        };
        let action = sample_from_logits(&logits, greedy, &mut rngs.policy);
        let (clean, next) = step(task, state, action, &mut rngs.env)?;
        let poisoned = poison_coin(epsilon, &mut rngs.coin);
        let observed = attack.observe_step(task, state, action, clean, poisoned, &mut rngs.attack)?;
        buffer.push(state, action, observed, clean, next, poisoned);
        trace.push(PoisonStep {
            state,
            action,
            delta: observed - clean,
            poisoned,
            clean_reward: clean,
        });
        actions.push(action);
        if fixed_query {
            let entry = ContextEntry { state, action, reward: observed, next_state: next };
            last_logits = inference.step(model, &encode_entry(task, &entry))?;
        }
        state = next;
    }

    let clean_return = buffer.clean_return();
    let clean_regret = if fixed_query { cumulative_regret(task, &actions) } else { 0.0 };
    Ok(DeployOutcome { buffer, trace, actions, clean_regret, clean_return })
}

/// Stateful in-context lifetime for gridworld evaluation: run `episodes`
/// H-step episodes on one task, carrying the victim-view context across
/// episode boundaries through a sliding window of the model's capacity, and
/// return the final episode's outcome. This mirrors the warm-up-then-evaluate
/// protocol of the tabular victims, whose learned state also persists across
/// their warm-up episodes; a cold in-context learner gets the same chance to
/// locate the goal before the scored episode.
pub fn deploy_in_context_lifetime(
    model: &ModelParams,
    task: &Task,
    attack: &mut AttackPolicy,
    epsilon: f64,
    episodes: usize,
    greedy: bool,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let horizon = task.horizon();
    let capacity = model.cfg.context_capacity;
    let mut window: Vec<ContextEntry> = Vec::with_capacity(capacity);
    let mut last = None;
    for _ep in 0..episodes.max(1) {
        let mut buffer = ContextBuffer::new();
        let mut trace = EpisodeTrace::default();
        let mut actions = Vec::with_capacity(horizon);
        let mut state = task.start_state();
        attack.begin_episode();
        for _h in 0..horizon {
            let seq = encode_context(task, state, &window);
            let cache = forward(model, &seq.data, seq.len)?;
            let logits = cache.logits_at(seq.len - 1, model.cfg.output_width);
            let action = sample_from_logits(logits, greedy, &mut rngs.policy);
            let (clean, next) = step(task, state, action, &mut rngs.env)?;
            let poisoned = poison_coin(epsilon, &mut rngs.coin);
            let observed =
                attack.observe_step(task, state, action, clean, poisoned, &mut rngs.attack)?;
            buffer.push(state, action, observed, clean, next, poisoned);
            trace.push(PoisonStep {
                state,
                action,
                delta: observed - clean,
                poisoned,
                clean_reward: clean,
            });
            actions.push(action);
            if window.len() == capacity {
                window.remove(0);
            }
            window.push(ContextEntry { state, action, reward: observed, next_state: next });
            state = next;
        }
        let clean_return = buffer.clean_return();
        last = Some(DeployOutcome { buffer, trace, actions, clean_regret: 0.0, clean_return });
    }
    Ok(last.expect("at least one episode"))
}

// ---------------------------------------------------------------------------
// Classical-victim episodes (shared by attacker training and evaluation)
// ---------------------------------------------------------------------------

/// One poisoned episode of a stateful bandit policy.
pub fn run_bandit_victim_episode(
    policy: &mut dyn BanditPolicy,
    task: &Task,
    attack: &mut AttackPolicy,
    epsilon: f64,
    rngs: &mut EpisodeRngs,
) -> Result<DeployOutcome> {
    let mut buffer = ContextBuffer::new();
    let mut trace = EpisodeTrace::default();
    let mut actions = Vec::with_capacity(task.horizon());
    attack.begin_episode();
    for h in 1..=task.horizon() {
        let action = policy.select(h, &mut rngs.policy);
        let (clean, next) = step(task, 0, action, &mut rngs.env)?;
        let poisoned = poison_coin(epsilon, &mut rngs.coin);
        let observed = attack.observe_step(task, 0, action, clean, poisoned, &mut rngs.attack)?;
        policy.observe(action, observed);
        buffer.push(0, action, observed, clean, next, poisoned);
        trace.push(PoisonStep { state: 0, action, delta: observed - clean, poisoned, clean_reward: clean });
        actions.push(action);
    }
    let clean_return = buffer.clean_return();
    let clean_regret = cumulative_regret(task, &actions);
    Ok(DeployOutcome { buffer, trace, actions, clean_regret, clean_return })
}

// ---------------------------------------------------------------------------
// Adversarial training (the central loop)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean clean cumulative regret over tasks (bandits).
    pub mean_clean_regret: f64,
    /// Mean clean episode return over tasks.
    pub mean_clean_return: f64,
    pub mean_poisoned_fraction: f64,
    /// True when a non-finite update forced a rollback to the round start.
    pub aborted: bool,
}

/// Per-task attackers for one adversarial run.
pub enum TaskAttackers {
    Bandit(Vec<BanditAttacker>),
    Mdp(Vec<MdpAttacker>),
}

impl TaskAttackers {
    pub fn init(tasks: &[Task]) -> Self {
        match tasks[0].kind() {
            EnvKind::Bandit | EnvKind::LinearBandit => TaskAttackers::Bandit(
                tasks.iter().map(|t| BanditAttacker::new(t.num_actions())).collect(),
            ),
            EnvKind::Darkroom2 => TaskAttackers::Mdp(
                tasks
                    .iter()
                    .map(|t| MdpAttacker::new(t.num_states(), t.num_actions()))
                    .collect(),
            ),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskAttackers::Bandit(v) => v.len(),
            TaskAttackers::Mdp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn policy_for(&self, i: usize) -> AttackPolicy {
        match self {
            TaskAttackers::Bandit(v) => AttackPolicy::Bandit(v[i].clone()),
            TaskAttackers::Mdp(v) => AttackPolicy::Mdp(v[i].clone()),
        }
    }

    fn update(&mut self, i: usize, trace: &EpisodeTrace, cfg: &RoundConfig) {
        match self {
            TaskAttackers::Bandit(v) => reinforce_update_bandit(
                &mut v[i],
                std::slice::from_ref(trace),
                &cfg.attack,
                cfg.attacker_lr,
            ),
            TaskAttackers::Mdp(v) => reinforce_update_mdp(
                &mut v[i],
                std::slice::from_ref(trace),
                &cfg.attack,
                cfg.attacker_lr,
            ),
        }
    }
}

/// Query state for a round's supervised batch: bandits use the dummy state,
/// the gridworld samples a state visited in this episode.
fn sample_query_state(task: &Task, buffer: &ContextBuffer, rng: &mut ChaCha8Rng) -> usize {
    match task.kind() {
        EnvKind::Bandit | EnvKind::LinearBandit => 0,
        EnvKind::Darkroom2 => {
            if buffer.is_empty() {
                rng.gen_range(0..task.num_states())
            } else {
                let view = buffer.victim_view();
                view[rng.gen_range(0..view.len())].state
            }
        }
    }
}

/// One adversarial round: roll out every task under its attacker, update the
/// attackers from the clean-view traces, then run `iterations_per_round`
/// supervised steps on the poisoned contexts with oracle labels. On any
/// non-finite update the model and optimizer are restored to the round start.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_round(
    model: &mut ModelParams,
    optimizer: &mut AdamState,
    attackers: &mut TaskAttackers,
    tasks: &[Task],
    cfg: &RoundConfig,
    round: usize,
    seed: u64,
    greedy: bool,
) -> Result<RoundMetrics> {
    assert_eq!(attackers.len(), tasks.len(), "one attacker per task");
    let snapshot = model.clone();

    let mut regret_sum = 0.0;
    let mut return_sum = 0.0;
    let mut poison_sum = 0.0;
    let mut batches = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut policy = attackers.policy_for(i);
        let mut rngs = EpisodeRngs::new(seed, &[round as u64, i as u64]);
        let outcome = deploy_in_context(model, task, &mut policy, cfg.attack.epsilon, greedy, &mut rngs)?;
        // write back the attacker's episode statistics is unnecessary for the
        // direct attackers (stateless during rollout); train it on the trace
        attackers.update(i, &outcome.trace, cfg);
        regret_sum += outcome.clean_regret;
        return_sum += outcome.clean_return;
        poison_sum += outcome.buffer.poisoned_fraction();
        if !cfg.freeze_victim {
            let mut qrng = substream(seed, &[round as u64, i as u64, tag::QUERY]);
            let q = sample_query_state(task, &outcome.buffer, &mut qrng);
            let label = optimal_action(task, q);
            let seq = encode_context(task, q, outcome.buffer.victim_view());
            batches.push(TokenBatch::with_uniform_target(seq, label));
        }
    }

    let mut aborted = false;
    if !cfg.freeze_victim {
        let optimizer_snapshot_step = optimizer.step_count();
        for iter in 0..cfg.iterations_per_round {
            let mut grads = ModelParams::zeros_like(model.cfg);
            let mut ok = true;
            let mut iter_loss = 0.0;
            for b in &batches {
                let cache = forward(model, &b.seq.data, b.seq.len)?;
                match nll_loss(&cache.logits, &b.targets, &b.mask, model.cfg.output_width) {
                    Ok((loss, dlogits)) if loss.is_finite() => {
                        iter_loss += loss;
                        backward(model, &cache, &dlogits, &mut grads)
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if std::env::var_os("ATDPT_DEBUG").is_some() {
                eprintln!(
                    "round {round} iter {iter} loss {:.4}",
                    iter_loss / batches.len() as f64
                );
            }
            grads.scale(1.0 / batches.len() as f64);
            grads.clip_global_norm(GRAD_CLIP_NORM);
            if !ok
                || !crate::transformer::optimizer_step(model, &grads, optimizer, cfg.victim_lr)
                || !model.all_finite()
            {
                *model = snapshot;
                aborted = true;
                let _ = optimizer_snapshot_step;
                break;
            }
        }
    }

    let n = tasks.len() as f64;
    Ok(RoundMetrics {
        round,
        mean_clean_regret: regret_sum / n,
        mean_clean_return: return_sum / n,
        mean_poisoned_fraction: poison_sum / n,
        aborted,
    })
}

/// Run the full adversarial loop: N rounds of co-training between the
/// in-context victim and its per-task attackers.
pub fn run_adversarial_training(
    model: &mut ModelParams,
    tasks: &[Task],
    cfg: &RoundConfig,
    seed: u64,
) -> Result<(TaskAttackers, Vec<RoundMetrics>)> {
    let mut attackers = TaskAttackers::init(tasks);
    let mut optimizer = AdamState::new(model);
    let mut curve = Vec::with_capacity(cfg.num_rounds);
    for round in 0..cfg.num_rounds {
        let metrics =
            adversarial_round(model, &mut optimizer, &mut attackers, tasks, cfg, round, seed, false)?;
        curve.push(metrics);
    }
    Ok((attackers, curve))
}

// ---------------------------------------------------------------------------
// Attacker training against named victims
// ---------------------------------------------------------------------------

/// Classical victims an attacker can target directly (the transformer
/// victims go through `run_adversarial_training` with or without freezing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicalVictim {
    ThompsonSampling,
    Ucb,
    RobustTs(crate::victims::RtsRegime),
    CrUcb(crate::victims::CrUcbVariant),
    LinUcb,
    CrLinUcb(crate::victims::CrLinUcbVariant),
    QLearning,
    Npg,
}

impl ClassicalVictim {
    pub fn parse(name: &str) -> Result<Self> {
        use crate::victims::{CrLinUcbVariant, CrUcbVariant, RtsRegime};
        Ok(match name {
            "ts" => ClassicalVictim::ThompsonSampling,
            "ucb" => ClassicalVictim::Ucb,
            "rts-known" => ClassicalVictim::RobustTs(RtsRegime::Known),
            "rts-unknown" => ClassicalVictim::RobustTs(RtsRegime::Unknown),
            "rts-tuned" => ClassicalVictim::RobustTs(RtsRegime::Tuned),
            "crucb" => ClassicalVictim::CrUcb(CrUcbVariant::Original),
            "crucb-low" => ClassicalVictim::CrUcb(CrUcbVariant::LowSigma0),
            "crucb-mod" => ClassicalVictim::CrUcb(CrUcbVariant::Modified),
            "linucb" => ClassicalVictim::LinUcb,
            "crlinucb-v1" => ClassicalVictim::CrLinUcb(CrLinUcbVariant::V1),
            "crlinucb-v2" => ClassicalVictim::CrLinUcb(CrLinUcbVariant::V2),
            "crlinucb-v3" => ClassicalVictim::CrLinUcb(CrLinUcbVariant::V3),
            "q-learning" => ClassicalVictim::QLearning,
            "npg" => ClassicalVictim::Npg,
            other => return Err(Error::UnknownVictim(other.to_string())),
        })
    }
}

pub mod victim_runner;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::sample_bandit_task;
    use crate::transformer::TransformerConfig;
    use crate::victims::{ThompsonSampling, TsConfig};

    fn bandit_sampler(num_arms: usize, horizon: usize) -> impl FnMut(&mut ChaCha8Rng) -> Task {
        move |rng| Task::Bandit(sample_bandit_task(num_arms, horizon, rng))
    }

    fn tiny_model(horizon: usize, rng: &mut ChaCha8Rng) -> ModelParams {
        let cfg = TransformerConfig::new(2, 2, 16, horizon, 6, 5);
        ModelParams::init(cfg, rng)
    }

    #[test]
    fn pretrain_dataset_shape_and_purity() {
        let mut rng = substream(200, &[]);
        let mut sampler = bandit_sampler(5, 30);
        let samples = generate_pretrain_dataset(&mut sampler, 50, &mut rng).unwrap();
        assert_eq!(samples.len(), 50);
        for s in &samples {
            assert_eq!(s.context.len(), 30);
            assert_eq!(s.query_state, 0);
            assert_eq!(s.optimal_action, optimal_action(&s.task, 0));
        }
    }

    #[test]
    fn pretrain_label_distribution_is_symmetric() {
        // uniform arm means: each arm optimal with probability 1/|A|
        let mut rng = substream(201, &[]);
        let mut sampler = bandit_sampler(5, 1);
        let samples = generate_pretrain_dataset(&mut sampler, 10_000, &mut rng).unwrap();
        let mut counts = [0usize; 5];
        for s in &samples {
            counts[s.optimal_action] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.2).abs() < 0.02, "label frequency {f}");
        }
    }

    #[test]
    fn pretrain_beats_uniform_baseline_and_zero_epochs_is_noop() {
        let mut rng = substream(202, &[]);
        let mut model = tiny_model(20, &mut rng);
        let mut sampler = bandit_sampler(5, 20);
        let samples = generate_pretrain_dataset(&mut sampler, 64, &mut rng).unwrap();

        let before = model.clone();
        let trace = pretrain(&mut model, &samples, 0, 1e-3, 16, &mut rng).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);

        let trace = pretrain(&mut model, &samples, 3, 1e-3, 16, &mut rng).unwrap();
        assert_eq!(trace.len(), 3);
        assert!(trace[2] < 5.0f64.ln(), "loss {} vs uniform {}", trace[2], 5.0f64.ln());
        assert!(trace[2] < trace[0]);
    }

    #[test]
    fn deploy_trace_has_horizon_steps_and_clean_views_match_without_attacker() {
        let mut rng = substream(203, &[]);
        let model = tiny_model(25, &mut rng);
        let task = Task::Bandit(sample_bandit_task(5, 25, &mut rng));
        let mut rngs = EpisodeRngs::new(7, &[0]);
        let mut attack = AttackPolicy::None;
        let out = deploy_in_context(&model, &task, &mut attack, 0.4, false, &mut rngs).unwrap();
        assert_eq!(out.actions.len(), 25);
        assert_eq!(out.buffer.len(), 25);
        for (v, a) in out.buffer.victim_view().iter().zip(out.buffer.attacker_view()) {
            assert_eq!(v.reward, a.reward);
        }
    }

    #[test]
    fn deploy_views_differ_only_on_poisoned_steps() {
        let mut rng = substream(204, &[]);
        let model = tiny_model(40, &mut rng);
        let task = Task::Bandit(sample_bandit_task(5, 40, &mut rng));
        let mut attacker = BanditAttacker::new(5);
        attacker.mean_shift = vec![2.0; 5];
        let mut attack = AttackPolicy::Bandit(attacker);
        let mut rngs = EpisodeRngs::new(8, &[0]);
        let out = deploy_in_context(&model, &task, &mut attack, 0.5, false, &mut rngs).unwrap();
        let mut differing = 0usize;
        let mut poisoned = 0usize;
        for ((v, a), step) in out
            .buffer
            .victim_view()
            .iter()
            .zip(out.buffer.attacker_view())
            .zip(&out.trace.steps)
        {
            if v.reward != a.reward {
                differing += 1;
                assert!(step.poisoned);
            }
            if step.poisoned {
                poisoned += 1;
            }
        }
        assert!(differing <= poisoned);
        assert!(poisoned > 0);
    }

    #[test]
    fn deploy_is_reproducible() {
        let mut rng = substream(205, &[]);
        let model = tiny_model(20, &mut rng);
        let task = Task::Bandit(sample_bandit_task(5, 20, &mut rng));
        let run = |seed: u64| {
            let mut rngs = EpisodeRngs::new(seed, &[3]);
            let mut attack = AttackPolicy::Uniform(vec![1.0, -1.0, 0.5, 0.0, -0.5]);
            deploy_in_context(&model, &task, &mut attack, 0.4, false, &mut rngs).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.clean_regret, b.clean_regret);
        assert_eq!(
            a.buffer.victim_view().iter().map(|e| e.reward).collect::<Vec<_>>(),
            b.buffer.victim_view().iter().map(|e| e.reward).collect::<Vec<_>>()
        );
        assert_ne!(run(12).actions, a.actions);
    }

    #[test]
    fn bandit_victim_episode_records_regret() {
        let mut rng = substream(206, &[]);
        let task = Task::Bandit(sample_bandit_task(5, 100, &mut rng));
        let mut policy = ThompsonSampling::new(5, TsConfig::default());
        let mut attack = AttackPolicy::None;
        let mut rngs = EpisodeRngs::new(9, &[0]);
        let out = run_bandit_victim_episode(&mut policy, &task, &mut attack, 0.0, &mut rngs).unwrap();
        assert_eq!(out.actions.len(), 100);
        assert!(out.clean_regret >= 0.0);
        assert_eq!(out.buffer.poisoned_fraction(), 0.0);
    }

    #[test]
    fn frozen_victim_round_leaves_model_unchanged() {
        let mut rng = substream(207, &[]);
        let mut model = tiny_model(15, &mut rng);
        let tasks: Vec<Task> =
            (0..4).map(|_| Task::Bandit(sample_bandit_task(5, 15, &mut rng))).collect();
        let cfg = RoundConfig {
            num_tasks: 4,
            num_rounds: 2,
            iterations_per_round: 3,
            attack: AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap(),
            victim_lr: 1e-4,
            attacker_lr: 0.03,
            freeze_victim: true,
        };
        let before = model.clone();
        let mut attackers = TaskAttackers::init(&tasks);
        let mut optimizer = AdamState::new(&model);
        let metrics =
            adversarial_round(&mut model, &mut optimizer, &mut attackers, &tasks, &cfg, 0, 42, false)
                .unwrap();
        assert_eq!(model, before);
        assert!(!metrics.aborted);
        assert!(metrics.mean_poisoned_fraction > 0.0);
    }

    #[test]
    fn adversarial_round_updates_model_and_is_replayable() {
        let mut rng = substream(208, &[]);
        let mut model = tiny_model(15, &mut rng);
        let tasks: Vec<Task> =
            (0..4).map(|_| Task::Bandit(sample_bandit_task(5, 15, &mut rng))).collect();
        let cfg = RoundConfig {
            num_tasks: 4,
            num_rounds: 1,
            iterations_per_round: 2,
            attack: AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap(),
            victim_lr: 1e-4,
            attacker_lr: 0.03,
            freeze_victim: false,
        };
        let mut model_b = model.clone();
        let run = |model: &mut ModelParams| {
            let mut attackers = TaskAttackers::init(&tasks);
            let mut optimizer = AdamState::new(model);
            adversarial_round(model, &mut optimizer, &mut attackers, &tasks, &cfg, 0, 42, false)
                .unwrap()
        };
        let m1 = run(&mut model);
        let m2 = run(&mut model_b);
        // bit-identical replay with the same seed
        assert_eq!(m1, m2);
        assert_eq!(model, model_b);
    }

    #[test]
    fn zero_rounds_returns_model_unchanged() {
        let mut rng = substream(209, &[]);
        let mut model = tiny_model(10, &mut rng);
        let tasks = vec![Task::Bandit(sample_bandit_task(5, 10, &mut rng))];
        let cfg = RoundConfig {
            num_tasks: 1,
            num_rounds: 0,
            iterations_per_round: 5,
            attack: AttackConfig::new(0.4, 3.0, 1.0, 10.0).unwrap(),
            victim_lr: 1e-4,
            attacker_lr: 0.03,
            freeze_victim: false,
        };
        let before = model.clone();
        let (_, curve) = run_adversarial_training(&mut model, &tasks, &cfg, 1).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn unknown_victim_name_is_an_error() {
        assert!(ClassicalVictim::parse("ts").is_ok());
        assert!(ClassicalVictim::parse("gradient-bandit").is_err());
    }
}
