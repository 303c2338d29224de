//! Reward-poisoning attackers and the contamination channel.
//!
//! The observed reward equals the attack value on an epsilon-fraction of
//! steps (i.i.d. Bernoulli coin per step) and the clean reward otherwise.
//! Attackers maximize the negative clean return of their target, with soft
//! penalties keeping the mean corruption inside an L2 budget B and the
//! attack noise inside B_sigma.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::Task;
use crate::transformer::{forward, AdamState, ModelParams};
use crate::{Error, Result};

/// Perturbation support of the categorical (gridworld) attacker.
pub const MDP_DELTAS: [f64; 3] = [-1.0, 0.0, 1.0];

const BASELINE_DECAY: f64 = 0.9;
/// Lower bound on the adaptive attacker's sampling std.
const STD_FLOOR: f64 = 1e-3;

/// Gaussian-attacker stability guards: the score term scales with 1/std^2,
/// so the update norm is capped and log-std kept in a safe band to stop the
/// perturbation distribution from diverging.
const ATTACKER_GRAD_CLIP: f64 = 30.0;
const LOG_STD_MIN: f64 = -6.9; // ~ln(STD_FLOOR)
const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Fraction of steps whose reward is replaced by the attack value.
    pub epsilon: f64,
    /// L2 budget B on the mean corruption vector.
    pub budget: f64,
    /// L2 budget B_sigma on the attack std vector.
    pub sigma_budget: f64,
    /// Soft-penalty strength lambda.
    pub lambda: f64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, budget: f64, sigma_budget: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0,1], got {epsilon}")));
        }
        if budget <= 0.0 {
            return Err(Error::Config(format!("budget must be positive, got {budget}")));
        }
        if sigma_budget < 0.0 || lambda <= 0.0 {
            return Err(Error::Config("sigma_budget must be >= 0 and lambda > 0".into()));
        }
        Ok(Self { epsilon, budget, sigma_budget, lambda })
    }

    /// Soft budget penalty: lambda * (c(|mu|; B) + c(|sigma|; B_sigma)) with
    /// c(x; b) = max(0, x - b).
    pub fn penalty(&self, mean_norm: f64, sigma_norm: f64) -> f64 {
        self.lambda
            * ((mean_norm - self.budget).max(0.0) + (sigma_norm - self.sigma_budget).max(0.0))
    }
}

/// The contamination coin. Drawn independently of the attack value so the
/// poisoned-step pattern does not depend on attacker parameters.
pub fn poison_coin(epsilon: f64, rng: &mut ChaCha8Rng) -> bool {
    rng.gen::<f64>() < epsilon
}

/// Huber-style channel: observe the attack value with probability epsilon,
/// the clean value otherwise.
pub fn contaminate(
    clean_reward: f64,
    attack_reward: f64,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, bool) {
    if poison_coin(epsilon, rng) {
        (attack_reward, true)
    } else {
        (clean_reward, false)
    }
}

/// One attacked step as recorded for REINFORCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoisonStep {
    pub state: usize,
    pub action: usize,
    /// Sampled perturbation (attack value minus clean reward); 0 on clean steps.
    pub delta: f64,
    pub poisoned: bool,
    pub clean_reward: f64,
}

/// Per-episode record the attacker trains on: its own actions plus the clean
/// return of the victim.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub steps: Vec<PoisonStep>,
    pub clean_return: f64,
}

impl EpisodeTrace {
    pub fn push(&mut self, step: PoisonStep) {
        self.clean_return += step.clean_reward;
        self.steps.push(step);
    }
}

// ---------------------------------------------------------------------------
// Direct bandit attacker
// ---------------------------------------------------------------------------

/// Gaussian per-arm attack: r_attack = r_clean + N(mean_shift[a], std[a]^2).
#[derive(Debug, Clone, PartialEq)]
pub struct BanditAttacker {
    pub mean_shift: Vec<f64>,
    pub log_std: Vec<f64>,
    baseline: f64,
    baseline_ready: bool,
}

impl BanditAttacker {
    pub fn new(num_arms: usize) -> Self {
        Self {
            mean_shift: vec![0.0; num_arms],
            log_std: vec![0.0; num_arms],
            baseline: 0.0,
            baseline_ready: false,
        }
    }

    pub fn mean_norm(&self) -> f64 {
        l2_norm(&self.mean_shift)
    }

    pub fn sigma_norm(&self) -> f64 {
        l2_norm_mapped(&self.log_std, f64::exp)
    }

    /// Sample the perturbation for one poisoned step.
    pub fn sample_delta(&self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean_shift[arm] + self.log_std[arm].exp() * z
    }
}

pub fn attack_reward_bandit(
    attacker: &BanditAttacker,
    arm: usize,
    clean_reward: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    clean_reward + attacker.sample_delta(arm, rng)
}

// ---------------------------------------------------------------------------
// Categorical MDP attacker
// ---------------------------------------------------------------------------

/// Per-(state, action) softmax over additive perturbations {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpAttacker {
    pub num_states: usize,
    pub num_actions: usize,
    /// `num_states * num_actions * 3`, row-major.
    pub logits: Vec<f64>,
    baseline: f64,
    baseline_ready: bool,
}

impl MdpAttacker {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions * 3],
            baseline: 0.0,
            baseline_ready: false,
        }
    }

    fn row(&self, state: usize, action: usize) -> &[f64] {
        let base = (state * self.num_actions + action) * 3;
        &self.logits[base..base + 3]
    }

    pub fn probs(&self, state: usize, action: usize) -> [f64; 3] {
        softmax3(self.row(state, action))
    }

    /// Per-(s,a) mean perturbation and its L2 norm over all pairs.
    pub fn mean_norm(&self) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let mu = row_moments(&self.probs(s, a)).0;
                acc += mu * mu;
            }
        }
        acc.sqrt()
    }

    pub fn sigma_norm(&self) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let (mu, s2) = row_moments(&self.probs(s, a));
                acc += (s2 - mu * mu).max(0.0);
            }
        }
        acc.sqrt()
    }

    pub fn sample_delta(&self, state: usize, action: usize, rng: &mut ChaCha8Rng) -> f64 {
        let p = self.probs(state, action);
        let u: f64 = rng.gen();
        if u < p[0] {
            MDP_DELTAS[0]
        } else if u < p[0] + p[1] {
            MDP_DELTAS[1]
        } else {
            MDP_DELTAS[2]
        }
    }
}

fn softmax3(logits: &[f64]) -> [f64; 3] {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

/// (E[delta], E[delta^2]) of one categorical row.
fn row_moments(p: &[f64; 3]) -> (f64, f64) {
    let mu = MDP_DELTAS.iter().zip(p).map(|(d, q)| d * q).sum::<f64>();
    let s2 = MDP_DELTAS.iter().zip(p).map(|(d, q)| d * d * q).sum::<f64>();
    (mu, s2)
}

pub fn attack_reward_mdp(
    attacker: &MdpAttacker,
    state: usize,
    action: usize,
    clean_reward: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    clean_reward + attacker.sample_delta(state, action, rng)
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Attack objective L = mean(-clean return) - lambda*c(|mu|; B)
/// - lambda*c(|sigma|; B_sigma); higher is better for the attacker.
pub fn attacker_objective(
    clean_returns: &[f64],
    mean_norm: f64,
    sigma_norm: f64,
    cfg: &AttackConfig,
) -> f64 {
    assert!(!clean_returns.is_empty(), "need at least one episode");
    let mean_neg: f64 =
        clean_returns.iter().map(|r| -r).sum::<f64>() / clean_returns.len() as f64;
    mean_neg - cfg.penalty(mean_norm, sigma_norm)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_norm_mapped(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    v.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// REINFORCE updates
// ---------------------------------------------------------------------------

/// Gradient ascent on L for the direct bandit attacker: score-function
/// estimator for the return term with an exponential-moving-average baseline,
/// analytic (sub)gradients for the penalties. No-op when no step was poisoned.
pub fn reinforce_update_bandit(
    attacker: &mut BanditAttacker,
    traces: &[EpisodeTrace],
    cfg: &AttackConfig,
    learning_rate: f64,
) {
    let poisoned: usize = traces
        .iter()
        .map(|t| t.steps.iter().filter(|s| s.poisoned).count())
        .sum();
    if poisoned == 0 || learning_rate == 0.0 {
        return;
    }
    let n = attacker.mean_shift.len();
    let mut g_mean = vec![0.0; n];
    let mut g_logstd = vec![0.0; n];
    for trace in traces {
        let objective = -trace.clean_return;
        let advantage = if attacker.baseline_ready {
            objective - attacker.baseline
        } else {
            0.0
        };
        attacker.baseline = if attacker.baseline_ready {
            BASELINE_DECAY * attacker.baseline + (1.0 - BASELINE_DECAY) * objective
        } else {
            objective
        };
        attacker.baseline_ready = true;
        if advantage == 0.0 {
            continue;
        }
        for step in trace.steps.iter().filter(|s| s.poisoned) {
            let a = step.action;
            let std = attacker.log_std[a].exp();
            let z = (step.delta - attacker.mean_shift[a]) / std;
            let inv = 1.0 / traces.len() as f64;
            g_mean[a] += advantage * (z / std) * inv;
            g_logstd[a] += advantage * (z * z - 1.0) * inv;
        }
    }
    // analytic penalty gradients (deterministic in the parameters)
    let mean_norm = attacker.mean_norm();
    if mean_norm > cfg.budget {
        for a in 0..n {
            g_mean[a] -= cfg.lambda * attacker.mean_shift[a] / mean_norm;
        }
    }
    let sigma_norm = attacker.sigma_norm();
    if sigma_norm > cfg.sigma_budget {
        for a in 0..n {
            let std = attacker.log_std[a].exp();
            g_logstd[a] -= cfg.lambda * std * std / sigma_norm;
        }
    }
    let gnorm = g_mean
        .iter()
        .chain(g_logstd.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let clip = if gnorm > ATTACKER_GRAD_CLIP { ATTACKER_GRAD_CLIP / gnorm } else { 1.0 };
    for a in 0..n {
        attacker.mean_shift[a] += learning_rate * clip * g_mean[a];
        attacker.log_std[a] = (attacker.log_std[a] + learning_rate * clip * g_logstd[a])
            .clamp(LOG_STD_MIN, LOG_STD_MAX);
    }
}

/// Same estimator for the categorical attacker; penalty gradients flow
/// through the softmax analytically.
pub fn reinforce_update_mdp(
    attacker: &mut MdpAttacker,
    traces: &[EpisodeTrace],
    cfg: &AttackConfig,
    learning_rate: f64,
) {
    let poisoned: usize = traces
        .iter()
        .map(|t| t.steps.iter().filter(|s| s.poisoned).count())
        .sum();
    if poisoned == 0 || learning_rate == 0.0 {
        return;
    }
    let mut grad = vec![0.0; attacker.logits.len()];
    for trace in traces {
        let objective = -trace.clean_return;
        let advantage = if attacker.baseline_ready {
            objective - attacker.baseline
        } else {
            0.0
        };
        attacker.baseline = if attacker.baseline_ready {
            BASELINE_DECAY * attacker.baseline + (1.0 - BASELINE_DECAY) * objective
        } else {
            objective
        };
        attacker.baseline_ready = true;
        if advantage == 0.0 {
            continue;
        }
        let inv = 1.0 / traces.len() as f64;
        for step in trace.steps.iter().filter(|s| s.poisoned) {
            let base = (step.state * attacker.num_actions + step.action) * 3;
            let p = attacker.probs(step.state, step.action);
            let chosen = MDP_DELTAS
                .iter()
                .position(|&d| d == step.delta)
                .expect("delta outside categorical support");
            for k in 0..3 {
                let indicator = if k == chosen { 1.0 } else { 0.0 };
                grad[base + k] += advantage * (indicator - p[k]) * inv;
            }
        }
    }
    // penalty gradients: d|mu|/dl and d|sigma|/dl via the softmax Jacobian
    let mean_norm = attacker.mean_norm();
    let sigma_norm = attacker.sigma_norm();
    let mean_active = mean_norm > cfg.budget && mean_norm > 0.0;
    let sigma_active = sigma_norm > cfg.sigma_budget && sigma_norm > 0.0;
    if mean_active || sigma_active {
        for s in 0..attacker.num_states {
            for a in 0..attacker.num_actions {
                let base = (s * attacker.num_actions + a) * 3;
                let p = attacker.probs(s, a);
                let (mu, s2) = row_moments(&p);
                let var = (s2 - mu * mu).max(1e-12);
                let sigma = var.sqrt();
                for k in 0..3 {
                    let dmu = p[k] * (MDP_DELTAS[k] - mu);
                    let ds2 = p[k] * (MDP_DELTAS[k] * MDP_DELTAS[k] - s2);
                    if mean_active {
                        grad[base + k] -= cfg.lambda * (mu / mean_norm) * dmu;
                    }
                    if sigma_active {
                        let dsigma = (ds2 - 2.0 * mu * dmu) / (2.0 * sigma);
                        grad[base + k] -= cfg.lambda * (sigma / sigma_norm) * dsigma;
                    }
                }
            }
        }
    }
    for (l, g) in attacker.logits.iter_mut().zip(&grad) {
        *l += learning_rate * g;
    }
}

// ---------------------------------------------------------------------------
// Adaptive transformer attacker
// ---------------------------------------------------------------------------

/// Context-conditioned attacker: the same causal architecture as the victim,
/// reading the clean-reward history and emitting a Gaussian (mean, log-std)
/// over an additive perturbation at each step.
#[derive(Debug, Clone)]
pub struct AdaptiveAttacker {
    pub model: ModelParams,
    pub optimizer: AdamState,
    /// Encoded (s, a, clean reward) tuples of the current episode.
    context: Vec<f64>,
    context_len: usize,
    /// Sampled (position, delta) pairs of the current episode.
    episode_samples: Vec<(usize, f64)>,
    baseline: f64,
    baseline_ready: bool,
}

/// Width of the attacker-side tuple token for `task`.
pub fn attacker_token_width(task: &Task) -> usize {
    match task.kind() {
        crate::envs::EnvKind::Bandit | crate::envs::EnvKind::LinearBandit => task.num_actions() + 1,
        crate::envs::EnvKind::Darkroom2 => task.num_states() + task.num_actions() + 1,
    }
}

/// Encode one (s, a, clean reward) tuple.
pub fn encode_attacker_token(task: &Task, state: usize, action: usize, clean_reward: f64) -> Vec<f64> {
    let mut token = vec![0.0; attacker_token_width(task)];
    match task.kind() {
        crate::envs::EnvKind::Bandit | crate::envs::EnvKind::LinearBandit => {
            token[action] = 1.0;
            token[task.num_actions()] = clean_reward;
        }
        crate::envs::EnvKind::Darkroom2 => {
            token[state] = 1.0;
            token[task.num_states() + action] = 1.0;
            token[task.num_states() + task.num_actions()] = clean_reward;
        }
    }
    token
}

impl AdaptiveAttacker {
    /// `model` must have `input_width = attacker_token_width(task)` and
    /// `output_width = 2` ((mean, log-std) head).
    pub fn new(model: ModelParams) -> Self {
        assert_eq!(model.cfg.output_width, 2, "adaptive attacker head is (mean, log-std)");
        let optimizer = AdamState::new(&model);
        Self {
            model,
            optimizer,
            context: Vec::new(),
            context_len: 0,
            episode_samples: Vec::new(),
            baseline: 0.0,
            baseline_ready: false,
        }
    }

    pub fn begin_episode(&mut self) {
        self.context.clear();
        self.context_len = 0;
        self.episode_samples.clear();
    }

    fn push_token(&mut self, token: &[f64]) {
        let width = self.model.cfg.input_width;
        if self.context_len == self.model.cfg.max_seq_len() {
            // sliding window: drop the oldest tuple
            self.context.drain(..width);
            self.context_len -= 1;
            // the window shifted, so earlier sampled positions moved too
            for (pos, _) in self.episode_samples.iter_mut() {
                *pos = pos.saturating_sub(1);
            }
        }
        self.context.extend_from_slice(token);
        self.context_len += 1;
    }

    /// Observe the current tuple, sample a perturbation, and return the
    /// attack reward. `poisoned` controls whether the sample is recorded for
    /// the policy gradient (the tuple enters the context either way).
    pub fn attack_reward_adaptive(
        &mut self,
        task: &Task,
        state: usize,
        action: usize,
        clean_reward: f64,
        poisoned: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let token = encode_attacker_token(task, state, action, clean_reward);
        self.push_token(&token);
        if !poisoned {
            return Ok(clean_reward);
        }
        let cache = forward(&self.model, &self.context, self.context_len)?;
        let out = cache.logits_at(self.context_len - 1, 2);
        let (mean, std) = (out[0], out[1].clamp(LOG_STD_MIN, LOG_STD_MAX).exp().max(STD_FLOOR));
        let z: f64 = StandardNormal.sample(rng);
        let delta = mean + std * z;
        self.episode_samples.push((self.context_len - 1, delta));
        Ok(clean_reward + delta)
    }

    /// Empirical per-arm (or per-state-action) mean and std of this
    /// episode's sampled perturbations, used for the budget penalty.
    fn empirical_norms(&self, steps: &[PoisonStep], num_groups: usize, task: &Task) -> (f64, f64) {
        let mut sums = vec![0.0; num_groups];
        let mut sq = vec![0.0; num_groups];
        let mut counts = vec![0usize; num_groups];
        for step in steps.iter().filter(|s| s.poisoned) {
            let g = match task.kind() {
                crate::envs::EnvKind::Darkroom2 => step.state * task.num_actions() + step.action,
                _ => step.action,
            };
            sums[g] += step.delta;
            sq[g] += step.delta * step.delta;
            counts[g] += 1;
        }
        let mut mean_acc = 0.0;
        let mut var_acc = 0.0;
        for g in 0..num_groups {
            if counts[g] == 0 {
                continue;
            }
            let m = sums[g] / counts[g] as f64;
            mean_acc += m * m;
            var_acc += (sq[g] / counts[g] as f64 - m * m).max(0.0);
        }
        (mean_acc.sqrt(), var_acc.sqrt())
    }

    /// REINFORCE across this episode: one Adam ascent step on
    /// advantage * log-likelihood of the sampled perturbations, with the
    /// budget penalties folded into the per-episode objective.
    pub fn reinforce_update_adaptive(
        &mut self,
        task: &Task,
        trace: &EpisodeTrace,
        cfg: &AttackConfig,
        learning_rate: f64,
    ) -> Result<()> {
        if self.episode_samples.is_empty() || learning_rate == 0.0 {
            return Ok(());
        }
        let num_groups = match task.kind() {
            crate::envs::EnvKind::Darkroom2 => task.num_states() * task.num_actions(),
            _ => task.num_actions(),
        };
        let (mean_norm, sigma_norm) = self.empirical_norms(&trace.steps, num_groups, task);
        let objective = -trace.clean_return - cfg.penalty(mean_norm, sigma_norm);
        let advantage = if self.baseline_ready {
            objective - self.baseline
        } else {
            0.0
        };
        self.baseline = if self.baseline_ready {
            BASELINE_DECAY * self.baseline + (1.0 - BASELINE_DECAY) * objective
        } else {
            objective
        };
        self.baseline_ready = true;
        if advantage == 0.0 {
            return Ok(());
        }

        let cache = forward(&self.model, &self.context, self.context_len)?;
        // ascent on advantage * log N(delta; mean, std) => descend the
        // negated gradient through Adam
        let mut dlogits = vec![0.0; self.context_len * 2];
        let inv = 1.0 / self.episode_samples.len() as f64;
        for &(pos, delta) in &self.episode_samples {
            let out = cache.logits_at(pos, 2);
            let std = out[1].clamp(LOG_STD_MIN, LOG_STD_MAX).exp().max(STD_FLOOR);
            let z = (delta - out[0]) / std;
            dlogits[pos * 2] = -advantage * (z / std) * inv;
            // no std gradient once the head saturates the safe log-std band
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&out[1]) {
                dlogits[pos * 2 + 1] = -advantage * (z * z - 1.0) * inv;
            }
        }
        let mut grads = ModelParams::zeros_like(self.model.cfg);
        crate::transformer::backward(&self.model, &cache, &dlogits, &mut grads);
        grads.clip_global_norm(ATTACKER_GRAD_CLIP);
        crate::transformer::optimizer_step(&mut self.model, &grads, &mut self.optimizer, learning_rate);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Uniform-random baseline attack
// ---------------------------------------------------------------------------

/// Frozen mean-shift vector: components uniform on [-B, B], projected onto
/// the L2 ball of radius B.
pub fn uniform_random_attack(num_components: usize, budget: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(budget > 0.0);
    let mut phi: Vec<f64> = (0..num_components)
        .map(|_| rng.gen_range(-budget..=budget))
        .collect();
    let norm = l2_norm(&phi);
    if norm > budget {
        let scale = budget / norm;
        for v in phi.iter_mut() {
            *v *= scale;
        }
    }
    phi
}
