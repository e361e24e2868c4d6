//! Doubly-separable multinomial logistic regression.
//!
//! The objective is rewritten with one variational value per data row so it
//! splits into independent (row, class) terms. That form admits three
//! trainers over the same update rule:
//!
//! * [`serial::run_serial`] — single-threaded reference loop.
//! * [`engine::ring::run_sync`] — P workers rotating weight blocks around a
//!   ring, with barriers between inner epochs.
//! * [`engine::tokens::run_async`] — P workers exchanging per-class tokens
//!   through queues, no global barrier.
//!
//! A full-batch backtracking oracle ([`serial::run_batch_oracle`]) certifies
//! the optimum the stochastic trainers are measured against.

pub mod data;
pub mod engine;
pub mod error;
pub mod math;
pub mod metrics;
pub mod partition;
pub mod serial;
pub mod weights;

pub use data::{parse_libsvm, parse_libsvm_file, write_libsvm, ParseOptions, SparseDataset, SparseRow};
pub use engine::ring::run_sync;
pub use engine::tokens::run_async;
pub use error::{Error, Result};
pub use math::{
    approx_gradient_error, exact_gradient_fi, log_partition, objective_l1, objective_l2,
    refresh_b, sgd_update, sparse_dot, Hyperparams, StepSchedule,
};
pub use metrics::{macro_f1, micro_f1, predict_scores, rank_cdf, ProgressLog, ProgressRecord, RankCdf};
pub use serial::{run_batch_oracle, run_serial, OracleConfig, OracleResult};
pub use weights::{Checkpoint, DenseWeights, WeightVector};
