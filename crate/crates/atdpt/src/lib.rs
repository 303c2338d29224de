//! A laboratory for test-time reward poisoning of in-context bandit/RL
//! policies: environments, classical victim algorithms, trainable attackers,
//! a compact causal transformer policy, the adversarial training loop, and
//! an experiment harness producing reproducible CSV metrics.

pub mod attackers;
pub mod dpt;
pub mod envs;
pub mod error;
pub mod harness;
pub mod rng;
pub mod transformer;
pub mod victims;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
