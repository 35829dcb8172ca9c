//! Per-user orchestration of the training and inference phases across
//! periods, plus configuration, persistence, sweeps and analysis.

pub mod analyze;
pub mod backend;
pub mod config;
pub mod pipeline;
pub mod run;
pub mod sweep;

pub use analyze::{analyze, CorrelationRow};
pub use backend::{build_native, build_native_from, build_remote, load_background, BaseCorpus};
pub use config::{derive_seed, BackendConfig, BackendKind, RemoteConfig, RunConfig, VocabScope};
pub use pipeline::{
    collect_retrieval_scores, infer_period, init_period_zero, train_period, QueryOutput, TrainOutcome, UserState,
};
pub use run::{run_stream, sanitize_id, RunLayout, RunOutcome, RunState};
pub use sweep::{sweep, SweepAxis, SweepResult};
