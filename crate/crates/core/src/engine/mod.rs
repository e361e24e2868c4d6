//! Multi-worker trainers over the doubly-separable objective.

pub(crate) mod common;
pub mod ring;
pub mod tokens;

pub use common::{EngineStats, TrainOutput, VariationalState};
