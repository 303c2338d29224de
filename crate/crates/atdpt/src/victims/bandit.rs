//! Multi-armed bandit victims: TS, UCB1.0, Robust TS, crUCB.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Per-arm pull counts and observed-reward lists (kept in full for trimming).
#[derive(Debug, Clone, Default)]
pub struct ArmStatistics {
    pub rewards: Vec<Vec<f64>>,
    pub sums: Vec<f64>,
}

impl ArmStatistics {
    pub fn new(num_arms: usize) -> Self {
        Self {
            rewards: vec![Vec::new(); num_arms],
            sums: vec![0.0; num_arms],
        }
    }

    pub fn num_arms(&self) -> usize {
        self.rewards.len()
    }

    pub fn count(&self, arm: usize) -> usize {
        self.rewards[arm].len()
    }

    pub fn total(&self) -> usize {
        self.rewards.iter().map(|r| r.len()).sum()
    }

    pub fn record(&mut self, arm: usize, reward: f64) {
        self.rewards[arm].push(reward);
        self.sums[arm] += reward;
    }

    pub fn mean(&self, arm: usize) -> f64 {
        let n = self.count(arm);
        if n == 0 {
            0.0
        } else {
            self.sums[arm] / n as f64
        }
    }
}

/// alpha-trimmed mean: drop ceil(alpha*n) from each end of the sorted copy,
/// average the rest. Returns 0 when nothing remains.
pub fn trimmed_mean(values: &[f64], alpha: f64) -> f64 {
    assert!((0.0..0.5).contains(&alpha) || alpha == 0.0);
    let n = values.len();
    let k = (alpha * n as f64).ceil() as usize;
    if n == 0 || n <= 2 * k {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let kept = &sorted[k..n - k];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Common interface: the harness drives every bandit victim through this.
pub trait BanditPolicy {
    /// Pick an arm at step h (1-based). Every implementation plays each arm
    /// once before applying its score rule.
    fn select(&mut self, h: usize, rng: &mut ChaCha8Rng) -> usize;
    fn observe(&mut self, arm: usize, reward: f64);
}

fn forced_round_robin(stats: &ArmStatistics) -> Option<usize> {
    (0..stats.num_arms()).find(|&a| stats.count(a) == 0)
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// --- Thompson sampling ------------------------------------------------------

/// Gaussian TS with a conjugate normal prior and known observation variance.
#[derive(Debug, Clone, Copy)]
pub struct TsConfig {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub obs_var: f64,
}

impl Default for TsConfig {
    fn default() -> Self {
        Self {
            prior_mean: 0.5,
            prior_var: 1.0,
            obs_var: 0.09,
        }
    }
}

pub struct ThompsonSampling {
    pub cfg: TsConfig,
    pub stats: ArmStatistics,
}

impl ThompsonSampling {
    pub fn new(num_arms: usize, cfg: TsConfig) -> Self {
        Self {
            cfg,
            stats: ArmStatistics::new(num_arms),
        }
    }

    pub fn posterior(&self, arm: usize) -> (f64, f64) {
        let n = self.stats.count(arm) as f64;
        let var = 1.0 / (1.0 / self.cfg.prior_var + n / self.cfg.obs_var);
        let mean = var * (self.cfg.prior_mean / self.cfg.prior_var + self.stats.sums[arm] / self.cfg.obs_var);
        (mean, var)
    }

    fn sample_scores(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.stats.num_arms())
            .map(|a| {
                let (mean, var) = self.posterior(a);
                Normal::new(mean, var.sqrt()).unwrap().sample(rng)
            })
            .collect()
    }
}

impl BanditPolicy for ThompsonSampling {
    fn select(&mut self, _h: usize, rng: &mut ChaCha8Rng) -> usize {
        if let Some(a) = forced_round_robin(&self.stats) {
            return a;
        }
        argmax(&self.sample_scores(rng))
    }

    fn observe(&mut self, arm: usize, reward: f64) {
        self.stats.record(arm, reward);
    }
}

// --- UCB1.0 -----------------------------------------------------------------

/// UCB index: mean + bonus_scale * sqrt(2 log h / N_a). The bonus scale is
/// config-exposed; the default is calibrated to the 0.3-noise reward scale.
#[derive(Debug, Clone, Copy)]
pub struct UcbConfig {
    pub bonus_scale: f64,
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self { bonus_scale: 0.45 }
    }
}

pub struct Ucb {
    pub cfg: UcbConfig,
    pub stats: ArmStatistics,
}

impl Ucb {
    pub fn new(num_arms: usize, cfg: UcbConfig) -> Self {
        Self {
            cfg,
            stats: ArmStatistics::new(num_arms),
        }
    }
}

impl BanditPolicy for Ucb {
    fn select(&mut self, h: usize, _rng: &mut ChaCha8Rng) -> usize {
        if let Some(a) = forced_round_robin(&self.stats) {
            return a;
        }
        let scores: Vec<f64> = (0..self.stats.num_arms())
            .map(|a| {
                let n = self.stats.count(a) as f64;
                self.stats.mean(a) + self.cfg.bonus_scale * (2.0 * (h as f64).ln() / n).sqrt()
            })
            .collect();
        argmax(&scores)
    }

    fn observe(&mut self, arm: usize, reward: f64) {
        self.stats.record(arm, reward);
    }
}

// --- Robust TS --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtsRegime {
    Known,
    Unknown,
    Tuned,
}

impl RtsRegime {
    pub fn name(&self) -> &'static str {
        match self {
            RtsRegime::Known => "known",
            RtsRegime::Unknown => "unknown",
            RtsRegime::Tuned => "tuned",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RtsConfig {
    pub corruption_bound: f64,
    pub regime: RtsRegime,
}

/// Corruption-level hyperparameter for the chosen regime.
/// known: sum of per-step corruption magnitudes from a supplied trace;
/// unknown: sqrt(H ln|A| / |A|); tuned: 0.5.
pub fn rts_bound(
    regime: RtsRegime,
    horizon: usize,
    num_arms: usize,
    observed_corruptions: Option<&[f64]>,
) -> Result<f64> {
    match regime {
        RtsRegime::Known => {
            let trace = observed_corruptions.ok_or(Error::MissingCorruptionTrace)?;
            Ok(trace.iter().map(|c| c.abs()).sum())
        }
        RtsRegime::Unknown => {
            Ok((horizon as f64 * (num_arms as f64).ln() / num_arms as f64).sqrt())
        }
        RtsRegime::Tuned => Ok(0.5),
    }
}

/// TS with an exploration bonus inflated by the corruption budget:
/// score = posterior sample + C_bar / N_a.
pub struct RobustTs {
    pub ts: ThompsonSampling,
    pub corruption_bound: f64,
}

impl RobustTs {
    pub fn new(num_arms: usize, ts_cfg: TsConfig, corruption_bound: f64) -> Self {
        Self {
            ts: ThompsonSampling::new(num_arms, ts_cfg),
            corruption_bound,
        }
    }
}

impl BanditPolicy for RobustTs {
    fn select(&mut self, _h: usize, rng: &mut ChaCha8Rng) -> usize {
        if let Some(a) = forced_round_robin(&self.ts.stats) {
            return a;
        }
        let scores: Vec<f64> = self
            .ts
            .sample_scores(rng)
            .into_iter()
            .enumerate()
            .map(|(a, s)| s + self.corruption_bound / self.ts.stats.count(a) as f64)
            .collect();
        argmax(&scores)
    }

    fn observe(&mut self, arm: usize, reward: f64) {
        self.ts.stats.record(arm, reward);
    }
}

// --- crUCB ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrUcbVariant {
    Original,
    LowSigma0,
    Modified,
}

impl CrUcbVariant {
    pub fn name(&self) -> &'static str {
        match self {
            CrUcbVariant::Original => "original",
            CrUcbVariant::LowSigma0 => "low_sigma0",
            CrUcbVariant::Modified => "modified",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrUcbConfig {
    /// Assumed fraction of steps poisoned; must satisfy 1 - 2*alpha > 0.
    pub alpha: f64,
    /// Upper bound on the sub-Gaussian constant.
    pub sigma0: f64,
    pub variant: CrUcbVariant,
}

impl CrUcbConfig {
    pub fn new(alpha: f64, sigma0: f64, variant: CrUcbVariant) -> Self {
        assert!(1.0 - 2.0 * alpha > 0.0, "alpha must be below 0.5");
        assert!(sigma0 > 0.0);
        Self {
            alpha,
            sigma0,
            variant,
        }
    }
}

/// Per-arm score for step h: trimmed-mean estimate plus the variant's bonus.
/// Unplayed arms (or a zero floored denominator in the modified variant)
/// score +infinity so they are tried first.
pub fn crucb_score(stats: &ArmStatistics, h: usize, cfg: &CrUcbConfig) -> Vec<f64> {
    assert!(h >= 1);
    let log_h = (h as f64).ln();
    (0..stats.num_arms())
        .map(|a| {
            let n = stats.count(a);
            if n == 0 {
                return f64::INFINITY;
            }
            let est = trimmed_mean(&stats.rewards[a], cfg.alpha);
            let bonus = match cfg.variant {
                CrUcbVariant::Modified => {
                    let denom = ((1.0 - 2.0 * cfg.alpha) * n as f64).floor();
                    if denom <= 0.0 {
                        return f64::INFINITY;
                    }
                    cfg.sigma0 * (4.0 * log_h / denom).sqrt()
                }
                CrUcbVariant::Original => {
                    cfg.sigma0 / (1.0 - 2.0 * cfg.alpha) * (4.0 * log_h / n as f64).sqrt()
                }
                CrUcbVariant::LowSigma0 => {
                    let sigma = cfg.sigma0 * (1.0 - 2.0 * cfg.alpha).sqrt();
                    sigma / (1.0 - 2.0 * cfg.alpha) * (4.0 * log_h / n as f64).sqrt()
                }
            };
            est + bonus
        })
        .collect()
}

pub struct CrUcb {
    pub cfg: CrUcbConfig,
    pub stats: ArmStatistics,
}

impl CrUcb {
    pub fn new(num_arms: usize, cfg: CrUcbConfig) -> Self {
        Self {
            cfg,
            stats: ArmStatistics::new(num_arms),
        }
    }
}

impl BanditPolicy for CrUcb {
    fn select(&mut self, h: usize, _rng: &mut ChaCha8Rng) -> usize {
        if let Some(a) = forced_round_robin(&self.stats) {
            return a;
        }
        argmax(&crucb_score(&self.stats, h, &self.cfg))
    }

    fn observe(&mut self, arm: usize, reward: f64) {
        self.stats.record(arm, reward);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_bandit_task, step, BanditTask, Task};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn trimmed_mean_cases() {
        let vals: Vec<f64> = (0..10).map(|x| x as f64).collect();
        // drop 1 from each end: mean of 1..=8 is 4.5
        assert_eq!(trimmed_mean(&vals, 0.1), 4.5);
        // alpha = 0 -> arithmetic mean
        assert_eq!(trimmed_mean(&vals, 0.0), 4.5);
        assert_eq!(trimmed_mean(&[1.0, 2.0, 4.0], 0.0), 7.0 / 3.0);
        // degenerate single element with trimming
        assert_eq!(trimmed_mean(&[5.0], 0.3), 0.0);
        assert_eq!(trimmed_mean(&[], 0.1), 0.0);
    }

    #[test]
    fn trimmed_mean_bounded_and_permutation_invariant() {
        let mut rng = substream(11, &[0]);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let alpha = rng.gen_range(0.0..0.49);
            let tm = trimmed_mean(&vals, alpha);
            let mut shuffled = vals.clone();
            shuffled.reverse();
            shuffled.rotate_left(n / 3);
            assert_eq!(tm, trimmed_mean(&shuffled, alpha));
            let k = (alpha * n as f64).ceil() as usize;
            if n > 2 * k {
                let mut sorted = vals.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert!(tm >= sorted[k] - 1e-12 && tm <= sorted[n - k - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn crucb_bonus_formulas() {
        let mut stats = ArmStatistics::new(1);
        for _ in 0..8 {
            stats.record(0, 0.0);
        }
        // modified, sigma0=1, alpha=0.25, N=8, h=e^2: sqrt(4*2/floor(4)) = sqrt 2
        let cfg = CrUcbConfig::new(0.25, 1.0, CrUcbVariant::Modified);
        let h = std::f64::consts::E.powi(2).round() as usize; // ln(7) != 2 exactly
        let _ = h;
        // evaluate with an explicit log by picking h where ln(h) is close;
        // instead verify against the closed form at h = 8 (any h works)
        let scores = crucb_score(&stats, 8, &cfg);
        let expect = (4.0 * (8f64).ln() / 4.0).sqrt();
        assert!((scores[0] - expect).abs() < 1e-9);

        // modified with N=1, alpha=0.4: floor(0.2) = 0 -> +inf
        let mut s1 = ArmStatistics::new(1);
        s1.record(0, 1.0);
        let cfg = CrUcbConfig::new(0.4, 1.0, CrUcbVariant::Modified);
        assert!(crucb_score(&s1, 5, &cfg)[0].is_infinite());

        // alpha = 0: modified and original coincide
        for h in [2usize, 10, 100] {
            let co = CrUcbConfig::new(0.0, 0.7, CrUcbVariant::Original);
            let cm = CrUcbConfig::new(0.0, 0.7, CrUcbVariant::Modified);
            let a = crucb_score(&stats, h, &co)[0];
            let b = crucb_score(&stats, h, &cm)[0];
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crucb_score_decreases_in_pull_count() {
        // fixed empirical mean, growing N: bonus shrinks for every variant
        for variant in [
            CrUcbVariant::Original,
            CrUcbVariant::LowSigma0,
            CrUcbVariant::Modified,
        ] {
            let cfg = CrUcbConfig::new(0.2, 1.0, variant);
            let mut prev = f64::INFINITY;
            for n in [2usize, 4, 8, 16, 64] {
                let mut stats = ArmStatistics::new(1);
                for _ in 0..n {
                    stats.record(0, 1.0);
                }
                let s = crucb_score(&stats, 1000, &cfg)[0];
                assert!(s < prev, "variant {variant:?} n {n}");
                assert!(s.is_finite());
                prev = s;
            }
        }
    }

    #[test]
    fn rts_bound_regimes() {
        let b = rts_bound(RtsRegime::Unknown, 500, 5, None).unwrap();
        assert!((b - 12.7).abs() < 0.05, "unknown bound {b}");
        assert_eq!(rts_bound(RtsRegime::Tuned, 500, 5, None).unwrap(), 0.5);
        assert_eq!(
            rts_bound(RtsRegime::Known, 500, 5, Some(&[0.0; 10])).unwrap(),
            0.0
        );
        assert!(rts_bound(RtsRegime::Known, 500, 5, None).is_err());
        let b = rts_bound(RtsRegime::Known, 3, 5, Some(&[1.0, -2.0, 0.5])).unwrap();
        assert!((b - 3.5).abs() < 1e-12);
    }

    #[test]
    fn forced_initialization_order() {
        let mut ucb = Ucb::new(5, UcbConfig::default());
        let mut rng = substream(12, &[0]);
        for h in 1..=5 {
            let a = ucb.select(h, &mut rng);
            assert_eq!(a, h - 1);
            ucb.observe(a, 0.0);
        }
    }

    #[test]
    fn ts_finds_best_arm() {
        let task = Task::Bandit(BanditTask {
            means: vec![0.2, 0.8],
            noise_std: 0.3,
            horizon: 500,
        });
        let mut optimal_late = 0usize;
        let mut total_late = 0usize;
        for run in 0..100 {
            let mut rng = substream(13, &[run]);
            let mut ts = ThompsonSampling::new(2, TsConfig::default());
            for h in 1..=500 {
                let a = ts.select(h, &mut rng);
                let (r, _) = step(&task, 0, a, &mut rng).unwrap();
                ts.observe(a, r);
                if h > 400 {
                    total_late += 1;
                    if a == 1 {
                        optimal_late += 1;
                    }
                }
            }
        }
        let frac = optimal_late as f64 / total_late as f64;
        assert!(frac > 0.9, "optimal fraction {frac}");
    }

    /// Sublinear regret: regret(2H)/regret(H) < 2 on clean tasks.
    #[test]
    fn clean_regret_is_sublinear() {
        let h1 = 250usize;
        let h2 = 500usize;
        let mut reg1 = 0.0;
        let mut reg2 = 0.0;
        for t in 0..120u64 {
            let mut task_rng = substream(14, &[t]);
            let bt = sample_bandit_task(5, h2, &mut task_rng);
            let task = Task::Bandit(bt.clone());
            let best = bt.means.iter().cloned().fold(f64::MIN, f64::max);
            for (kind, reg) in [(0, &mut reg1), (1, &mut reg2)] {
                let horizon = if kind == 0 { h1 } else { h2 };
                let mut rng = substream(15, &[t, kind as u64]);
                let algs: Vec<Box<dyn BanditPolicy>> = vec![
                    Box::new(ThompsonSampling::new(5, TsConfig::default())),
                    Box::new(Ucb::new(5, UcbConfig::default())),
                    Box::new(RobustTs::new(5, TsConfig::default(), 0.5)),
                    Box::new(CrUcb::new(
                        5,
                        CrUcbConfig::new(0.2, 0.3, CrUcbVariant::Modified),
                    )),
                ];
                for mut alg in algs {
                    for h in 1..=horizon {
                        let a = alg.select(h, &mut rng);
                        let (r, _) = step(&task, 0, a, &mut rng).unwrap();
                        alg.observe(a, r);
                        *reg += best - bt.means[a];
                    }
                }
            }
        }
        assert!(
            reg2 / reg1 < 2.0,
            "regret ratio {} (reg1 {reg1}, reg2 {reg2})",
            reg2 / reg1
        );
    }
}
