//! State and passes shared by every trainer.
//!
//! The serial loop, the ring engine, and the token engine all funnel their
//! numeric work through the functions here, so a single worker with a given
//! seed produces bit-identical trajectories no matter which engine drives
//! it.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::SparseDataset;
use crate::error::{Error, Result};
use crate::math::{refresh_b, sgd_update, Hyperparams};
use crate::metrics::{ProgressLog, ProgressRecord};
use crate::weights::{DenseWeights, WeightVector};

/// Per-row variational values owned by one worker, plus the running
/// accumulators used to refresh them.
#[derive(Debug, Clone)]
pub struct VariationalState {
    /// Log-domain value per local row; starts at -log K (zero weights).
    b: Vec<f64>,
    /// Linear-domain running sum of exp(w_k . x_i) over the classes seen
    /// this iteration.
    partial_sum: Vec<f64>,
    /// How many classes have been accumulated into each row this iteration.
    classes_seen: Vec<u32>,
}

impl VariationalState {
    pub fn new(n_local_rows: usize, n_classes: usize) -> Self {
        VariationalState {
            b: vec![-(n_classes as f64).ln(); n_local_rows],
            partial_sum: vec![0.0; n_local_rows],
            classes_seen: vec![0; n_local_rows],
        }
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }
}

/// Per-iteration logging accumulators kept next to the variational state.
#[derive(Debug, Clone)]
pub(crate) struct IterAccum {
    /// Dot product of each local row with its own label's class vector, as
    /// observed during accumulation.
    label_dot: Vec<f64>,
    /// Sum of |w_k|^2 over the class versions this worker observed.
    reg_sq_sum: f64,
}

impl IterAccum {
    pub(crate) fn new(n_local_rows: usize) -> Self {
        IterAccum {
            label_dot: vec![0.0; n_local_rows],
            reg_sq_sum: 0.0,
        }
    }
}

/// One worker's contribution to a progress record.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WorkerSlice {
    pub iter: u64,
    pub data_term: f64,
    pub reg_sq: f64,
    pub seconds: f64,
}

/// Deterministic per-worker RNG; streams keep workers independent of each
/// other and of token routing.
pub(crate) fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64);
    rng
}

/// Routing RNG owned by a single class token.
pub(crate) fn token_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_9d10_3f21_8b44);
    rng.set_stream(class as u64);
    rng
}

/// One stochastic pass of class `class` over the worker's local rows in the
/// given shuffled order, using the stale `b` values from the last refresh.
pub(crate) fn sgd_class_pass(
    w: &mut WeightVector,
    class: usize,
    data: &SparseDataset,
    row_start: usize,
    order: &[usize],
    vs: &VariationalState,
    t: usize,
    h: &Hyperparams,
    worker: usize,
) -> Result<()> {
    let n_classes = data.n_classes();
    for &li in order {
        let gi = row_start + li;
        let y_ik = data.label(gi) == class;
        sgd_update(w, data.row(gi), y_ik, vs.b[li], t, h, n_classes)
            .map_err(|e| e.in_worker(worker, Some(class), Some(gi)))?;
    }
    Ok(())
}

/// Folds class `class` into the partial sums of every local row (ascending
/// row order), records the label dot products, and adds the observed
/// |w_k|^2 to the regularizer slice.
pub(crate) fn absorb_class(
    w: &WeightVector,
    class: usize,
    data: &SparseDataset,
    row_start: usize,
    vs: &mut VariationalState,
    acc: &mut IterAccum,
    worker: usize,
) -> Result<()> {
    for li in 0..vs.b.len() {
        let gi = row_start + li;
        let dot = w.dot(data.row(gi));
        let e = dot.exp();
        if !e.is_finite() {
            return Err(Error::ExpOverflow { dot, arg: dot }.in_worker(
                worker,
                Some(class),
                Some(gi),
            ));
        }
        vs.partial_sum[li] += e;
        vs.classes_seen[li] += 1;
        if data.label(gi) == class {
            acc.label_dot[li] = dot;
        }
    }
    acc.reg_sq_sum += w.norm_sq();
    Ok(())
}

/// Exact refresh of every local `b` from the completed partial sums, and
/// computation of this worker's slice of the logged objective. Resets the
/// accumulators for the next iteration.
pub(crate) fn refresh_and_slice(
    vs: &mut VariationalState,
    acc: &mut IterAccum,
    n_classes: usize,
    row_start: usize,
    worker: usize,
) -> Result<(f64, f64)> {
    let expected = n_classes as u32;
    let mut data_term = 0.0;
    for li in 0..vs.b.len() {
        if vs.classes_seen[li] != expected {
            return Err(Error::IncompleteAccumulation {
                row: row_start + li,
                seen: vs.classes_seen[li],
                expected,
            }
            .in_worker(worker, None, Some(row_start + li)));
        }
        let b = refresh_b(vs.partial_sum[li])
            .map_err(|e| e.in_worker(worker, None, Some(row_start + li)))?;
        vs.b[li] = b;
        // the row's loss under the observed versions: log-partition minus
        // the label dot, where -b is the observed log partition
        data_term += -acc.label_dot[li] - b;
        vs.partial_sum[li] = 0.0;
        vs.classes_seen[li] = 0;
        acc.label_dot[li] = 0.0;
    }
    let reg_sq = acc.reg_sq_sum;
    acc.reg_sq_sum = 0.0;
    Ok((data_term, reg_sq))
}

/// Merges per-worker slices into one progress record per iteration. The
/// regularizer slices each count every class once, so their sum is divided
/// by the worker count.
pub(crate) fn assemble_records(
    slices: &[Vec<WorkerSlice>],
    lambda: f64,
    n_rows: usize,
    iterations: usize,
) -> ProgressLog {
    let p = slices.len() as f64;
    let n = n_rows as f64;
    let mut log = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let mut data = 0.0;
        let mut reg = 0.0;
        let mut seconds = 0.0f64;
        for worker in slices {
            let s = worker[t - 1];
            debug_assert_eq!(s.iter, t as u64);
            data += s.data_term;
            reg += s.reg_sq;
            seconds = seconds.max(s.seconds);
        }
        log.push(ProgressRecord::new(
            t as u64,
            lambda * 0.5 * reg / p + data / n,
            seconds,
        ));
    }
    log
}

/// Counters and probes a run can be inspected by.
#[derive(Debug, Clone, Default)]
pub struct EngineStats {
    /// Most class vectors resident at one worker at any observed instant
    /// (held plus queued for the token engine, held block for the ring).
    pub max_resident_vectors: Vec<usize>,
    /// Most tokens held (popped, not yet pushed) across all workers at once.
    pub max_tokens_held: usize,
    /// Token cycles that visited every worker and were reset.
    pub completed_token_cycles: u64,
    /// Tokens re-routed because the popping worker had already processed
    /// that class in its current iteration.
    pub conflict_reroutes: u64,
    /// Tokens relayed by workers that had already finished their
    /// iterations.
    pub forwarded_tokens: u64,
}

/// What every trainer returns.
#[derive(Debug)]
pub struct TrainOutput {
    pub weights: DenseWeights,
    pub progress: ProgressLog,
    pub stats: EngineStats,
}

/// Common argument validation for the multi-worker engines.
pub(crate) fn validate_run(
    data: &SparseDataset,
    n_workers: usize,
    iterations: usize,
    h: &Hyperparams,
) -> Result<()> {
    h.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("iteration count must be at least 1".into()));
    }
    if n_workers == 0 {
        return Err(Error::InvalidConfig("worker count must be at least 1".into()));
    }
    if n_workers > data.n_rows().min(data.n_classes()) {
        return Err(Error::InvalidConfig(format!(
            "{} workers exceed min(rows={}, classes={})",
            n_workers,
            data.n_rows(),
            data.n_classes()
        )));
    }
    Ok(())
}

/// Shuffles `0..n` into a fresh visiting order.
pub(crate) fn shuffled_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
