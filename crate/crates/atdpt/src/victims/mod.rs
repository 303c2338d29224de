//! Classical per-task learning algorithms used as attack targets and
//! robustness baselines. All of them consume only observed rewards.

mod bandit;
mod linear;
mod tabular;

pub use bandit::{
    crucb_score, rts_bound, trimmed_mean, ArmStatistics, BanditPolicy, CrUcb, CrUcbConfig,
    CrUcbVariant, RobustTs, RtsConfig, RtsRegime, ThompsonSampling, TsConfig, Ucb, UcbConfig,
};
pub use linear::{select_action_linear, CrLinUcbConfig, CrLinUcbVariant, LinUcb, LinUcbConfig};
pub use tabular::{
    npg_episode, q_learning_episode, EpisodeOutcome, ExplorationSchedule, NpgPolicy, QTable,
};
