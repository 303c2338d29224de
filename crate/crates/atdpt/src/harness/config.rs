//! Flat `key = value` experiment configuration (UTF-8, `#` comments), chosen
//! for diff-ability in replication studies. The resolved dump emitted before
//! every run contains every field and round-trips to an identical run.

use std::fmt::Write as _;

use crate::envs::EnvKind;
use crate::{Error, Result};

/// All knobs of one experiment. Defaults depend on the environment family;
/// `desk_scale` shrinks everything to single-CPU sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub epsilon: f64,
    pub budget: f64,
    pub sigma_budget: f64,
    pub lambda: f64,
    /// M: number of tasks per replication.
    pub num_tasks: usize,
    /// N: adversarial training rounds.
    pub num_rounds: usize,
    /// H: episode horizon.
    pub horizon: usize,
    pub num_arms: usize,
    pub feature_dim: usize,
    pub grid_side: usize,
    pub replications: usize,
    pub seed: u64,
    /// Algorithms (table rows); see `ClassicalVictim::parse` plus `dpt`, `at-dpt`.
    pub algorithms: Vec<String>,
    /// Attacker-target columns; `clean` and `uniform` are implicit baselines.
    pub attacker_targets: Vec<String>,
    pub pretrain_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub iterations_per_round: usize,
    pub victim_lr: f64,
    /// Attacker step size when training against classical victims.
    pub attacker_lr: f64,
    /// Attacker step size inside the adversarial co-training loop, where each
    /// per-task attacker gets one single-episode update per round.
    pub adv_attacker_lr: f64,
    pub adaptive_lr: f64,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Poisoned episodes each tabular victim runs per attacker round.
    pub tabular_episodes_per_round: usize,
    /// Episodes of one in-context lifetime when evaluating the transformer
    /// rows on gridworld tasks (context persists across episodes through a
    /// sliding window; the final episode is scored). Mirrors the tabular
    /// victims' warm-up-then-evaluate protocol.
    pub eval_episodes: usize,
    pub out_dir: String,
}

impl ExperimentConfig {
    /// Full-scale defaults for an environment family.
    pub fn default_for(env: EnvKind) -> Self {
        let (budget, horizon, num_rounds) = match env {
            EnvKind::Bandit => (3.0, 500, 20),
            EnvKind::LinearBandit => (3.0, 500, 20),
            EnvKind::Darkroom2 => (10.0, 100, 10),
        };
        Self {
            env,
            epsilon: 0.4,
            budget,
            sigma_budget: 1.0,
            lambda: 10.0,
            num_tasks: 200,
            num_rounds,
            horizon,
            num_arms: 5,
            feature_dim: 4,
            grid_side: 5,
            replications: 10,
            seed: 0,
            algorithms: default_algorithms(env),
            attacker_targets: default_targets(env),
            pretrain_samples: 1000,
            pretrain_epochs: 40,
            pretrain_batch: 64,
            pretrain_lr: 1e-3,
            iterations_per_round: 20,
            victim_lr: 1e-4,
            attacker_lr: 0.03,
            adv_attacker_lr: 0.03,
            adaptive_lr: 3e-5,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            tabular_episodes_per_round: 20,
            eval_episodes: 4,
            out_dir: "out".into(),
        }
    }

    /// Reduced sizes for a single-CPU run of the full pipeline.
    pub fn desk_scale(env: EnvKind) -> Self {
        let mut cfg = Self::default_for(env);
        cfg.num_tasks = 32;
        cfg.replications = 5;
        cfg.pretrain_samples = 800;
        cfg.pretrain_epochs = 40;
        cfg.pretrain_batch = 16;
        cfg.num_layers = 2;
        cfg.victim_lr = 3e-4;
        cfg.adv_attacker_lr = 0.3;
        match env {
            EnvKind::Bandit | EnvKind::LinearBandit => {
                cfg.horizon = 200;
                cfg.num_rounds = 20;
            }
            EnvKind::Darkroom2 => {
                cfg.horizon = 100;
                cfg.num_rounds = 5;
                cfg.tabular_episodes_per_round = 10;
                // The gridworld needs more pretraining data and depth than the
                // bandit to identify the high-reward goal in context.
                cfg.pretrain_samples = 4000;
                cfg.num_layers = 3;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.budget <= 0.0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.num_tasks == 0 || self.horizon == 0 {
            return Err(Error::Config("num_tasks and horizon must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        for name in &self.algorithms {
            if name != "dpt" && name != "at-dpt" {
                crate::dpt::ClassicalVictim::parse(name)?;
            }
        }
        for name in &self.attacker_targets {
            if name != "clean" && name != "uniform" && name != "dpt" && name != "at-dpt" {
                crate::dpt::ClassicalVictim::parse(name)?;
            }
        }
        Ok(())
    }

    /// Parse the flat text format, starting from the defaults of the `env`
    /// named in the file (which may appear anywhere) and overriding in file
    /// order. Unknown keys are errors, duplicated keys last-write-wins.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = split_pairs(text)?;
        let env_name = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "env")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config("missing required key `env`".into()))?;
        let env = parse_env(env_name)?;
        let mut cfg = Self::default_for(env);
        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for key `{what}`"));
        match key {
            "env" => self.env = parse_env(value)?,
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad(key))?,
            "budget" => self.budget = value.parse().map_err(|_| bad(key))?,
            "sigma_budget" => self.sigma_budget = value.parse().map_err(|_| bad(key))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key))?,
            "num_tasks" => self.num_tasks = value.parse().map_err(|_| bad(key))?,
            "num_rounds" => self.num_rounds = value.parse().map_err(|_| bad(key))?,
            "horizon" => self.horizon = value.parse().map_err(|_| bad(key))?,
            "num_arms" => self.num_arms = value.parse().map_err(|_| bad(key))?,
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad(key))?,
            "grid_side" => self.grid_side = value.parse().map_err(|_| bad(key))?,
            "replications" => self.replications = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "algorithms" => self.algorithms = parse_list(value),
            "attacker_targets" => self.attacker_targets = parse_list(value),
            "pretrain_samples" => self.pretrain_samples = value.parse().map_err(|_| bad(key))?,
            "pretrain_epochs" => self.pretrain_epochs = value.parse().map_err(|_| bad(key))?,
            "pretrain_batch" => self.pretrain_batch = value.parse().map_err(|_| bad(key))?,
            "pretrain_lr" => self.pretrain_lr = value.parse().map_err(|_| bad(key))?,
            "iterations_per_round" => {
                self.iterations_per_round = value.parse().map_err(|_| bad(key))?
            }
            "victim_lr" => self.victim_lr = value.parse().map_err(|_| bad(key))?,
            "attacker_lr" => self.attacker_lr = value.parse().map_err(|_| bad(key))?,
            "adv_attacker_lr" => self.adv_attacker_lr = value.parse().map_err(|_| bad(key))?,
            "adaptive_lr" => self.adaptive_lr = value.parse().map_err(|_| bad(key))?,
            "embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key))?,
            "num_layers" => self.num_layers = value.parse().map_err(|_| bad(key))?,
            "num_heads" => self.num_heads = value.parse().map_err(|_| bad(key))?,
            "tabular_episodes_per_round" => {
                self.tabular_episodes_per_round = value.parse().map_err(|_| bad(key))?
            }
            "eval_episodes" => self.eval_episodes = value.parse().map_err(|_| bad(key))?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Resolved dump: every field, stable order, reparses to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "env = {}", self.env.name());
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "sigma_budget = {}", self.sigma_budget);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "num_tasks = {}", self.num_tasks);
        let _ = writeln!(s, "num_rounds = {}", self.num_rounds);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "num_arms = {}", self.num_arms);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "grid_side = {}", self.grid_side);
        let _ = writeln!(s, "replications = {}", self.replications);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "algorithms = {}", self.algorithms.join(","));
        let _ = writeln!(s, "attacker_targets = {}", self.attacker_targets.join(","));
        let _ = writeln!(s, "pretrain_samples = {}", self.pretrain_samples);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "pretrain_batch = {}", self.pretrain_batch);
        let _ = writeln!(s, "pretrain_lr = {}", self.pretrain_lr);
        let _ = writeln!(s, "iterations_per_round = {}", self.iterations_per_round);
        let _ = writeln!(s, "victim_lr = {}", self.victim_lr);
        let _ = writeln!(s, "attacker_lr = {}", self.attacker_lr);
        let _ = writeln!(s, "adv_attacker_lr = {}", self.adv_attacker_lr);
        let _ = writeln!(s, "adaptive_lr = {}", self.adaptive_lr);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "tabular_episodes_per_round = {}", self.tabular_episodes_per_round);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        s
    }

    pub fn attack(&self) -> Result<crate::attackers::AttackConfig> {
        crate::attackers::AttackConfig::new(self.epsilon, self.budget, self.sigma_budget, self.lambda)
    }

    pub fn transformer(&self) -> crate::transformer::TransformerConfig {
        let input_width = match self.env {
            EnvKind::Bandit => self.num_arms + 1,
            EnvKind::LinearBandit => self.feature_dim + 1,
            EnvKind::Darkroom2 => {
                2 * self.num_states_for_env() + crate::envs::DARKROOM_ACTIONS + 1
            }
        };
        crate::transformer::TransformerConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            embed_dim: self.embed_dim,
            context_capacity: self.horizon,
            input_width,
            output_width: self.num_arms_for_env(),
        }
    }

    pub fn num_arms_for_env(&self) -> usize {
        match self.env {
            EnvKind::Bandit | EnvKind::LinearBandit => self.num_arms,
            EnvKind::Darkroom2 => crate::envs::DARKROOM_ACTIONS,
        }
    }

    pub fn num_states_for_env(&self) -> usize {
        match self.env {
            EnvKind::Bandit | EnvKind::LinearBandit => 1,
            EnvKind::Darkroom2 => self.grid_side * self.grid_side,
        }
    }
}

fn default_algorithms(env: EnvKind) -> Vec<String> {
    let names: &[&str] = match env {
        EnvKind::Bandit => &["ts", "ucb", "rts-tuned", "crucb-mod", "dpt", "at-dpt"],
        EnvKind::LinearBandit => &["linucb", "crlinucb-v2", "crlinucb-v3", "dpt", "at-dpt"],
        EnvKind::Darkroom2 => &["q-learning", "npg", "dpt", "at-dpt"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

fn default_targets(env: EnvKind) -> Vec<String> {
    let names: &[&str] = match env {
        EnvKind::Bandit => &["clean", "uniform", "ts", "ucb", "at-dpt"],
        EnvKind::LinearBandit => &["clean", "uniform", "linucb", "at-dpt"],
        EnvKind::Darkroom2 => &["clean", "uniform", "q-learning", "at-dpt"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

fn parse_env(name: &str) -> Result<EnvKind> {
    match name {
        "bandit" => Ok(EnvKind::Bandit),
        "linear" => Ok(EnvKind::LinearBandit),
        "darkroom2" => Ok(EnvKind::Darkroom2),
        other => Err(Error::Config(format!("unknown env `{other}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn split_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}
