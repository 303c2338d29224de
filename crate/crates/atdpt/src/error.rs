use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action {action} for task with {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("sequence length {len} exceeds context capacity {capacity}")]
    ContextOverflow { len: usize, capacity: usize },

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("known-corruption regime requires a corruption trace")]
    MissingCorruptionTrace,

    #[error("unknown victim id `{0}`")]
    UnknownVictim(String),

    #[error("missing checkpoint artifact: {0}")]
    MissingCheckpoint(String),

    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
