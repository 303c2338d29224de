//! Experiment orchestration: configuration, seeded replications, evaluation
//! matrices, budget sweeps, and CSV emission.

pub mod config;
pub mod eval;
pub mod metrics;

pub use config::ExperimentConfig;
pub use eval::{
    budget_sweep, build_replication, pretrain_model, run_evaluation_matrix, sample_task,
    Algorithm, AttackColumn, ReplicationArtifacts,
};
pub use metrics::{
    parse_csv, read_records, records_to_csv, summarize, summary_to_csv, write_atomic,
    write_records, MetricRecord, SummaryCell, CSV_HEADER,
};
