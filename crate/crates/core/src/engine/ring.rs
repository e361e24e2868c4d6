//! Synchronous trainer: P workers in a ring rotate contiguous weight
//! blocks. Each outer iteration runs P stochastic inner epochs (every
//! worker updates every block once) followed by P accumulation inner
//! epochs (partial sums only), then an exact refresh of the local
//! variational values.
//!
//! Handoff moves blocks through rendezvous channels, so a block is owned by
//! exactly one worker or one in-flight slot at any instant. A block's
//! epochs happen in chain order along the ring, which also means every
//! accumulation epoch observes fully updated vectors for that iteration.

use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use crate::data::SparseDataset;
use crate::engine::common::{
    absorb_class, assemble_records, refresh_and_slice, sgd_class_pass, shuffled_order,
    validate_run, worker_rng, EngineStats, IterAccum, TrainOutput, VariationalState, WorkerSlice,
};
use crate::error::{Error, Result};
use crate::math::Hyperparams;
use crate::partition::{contiguous_class_blocks, partition_rows};
use crate::weights::{DenseWeights, WeightVector};

/// A contiguous slice of the class vectors, owned by one worker at a time.
#[derive(Debug, Clone)]
pub struct WeightBlock {
    pub classes: Range<usize>,
    pub vectors: Vec<WeightVector>,
}

impl WeightBlock {
    pub fn zeros(classes: Range<usize>, n_features: usize) -> Self {
        let vectors = classes.clone().map(|_| WeightVector::zeros(n_features)).collect();
        WeightBlock { classes, vectors }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// The ring permutation: the block held by worker p moves to worker
/// (p+1) mod P. The threaded engine realizes exactly this permutation with
/// channels; this form exists for direct reasoning and tests.
pub fn ring_shift(mut blocks: Vec<WeightBlock>) -> Vec<WeightBlock> {
    if !blocks.is_empty() {
        blocks.rotate_right(1);
    }
    blocks
}

#[derive(Debug, Clone)]
pub struct SyncConfig {
    pub n_workers: usize,
    pub iterations: usize,
    pub hyper: Hyperparams,
    pub seed: u64,
    /// Record per-epoch block residency and verify conservation and visit
    /// completeness after the run.
    pub check_invariants: bool,
}

/// Runs the synchronous ring trainer with default instrumentation.
pub fn run_sync(
    data: &SparseDataset,
    n_workers: usize,
    iterations: usize,
    h: &Hyperparams,
    seed: u64,
) -> Result<TrainOutput> {
    run_sync_with(
        data,
        &SyncConfig {
            n_workers,
            iterations,
            hyper: *h,
            seed,
            check_invariants: false,
        },
    )
}

/// One (iteration, phase, epoch, held classes) residency observation.
type EpochLog = Vec<(usize, u8, usize, Range<usize>)>;

struct WorkerDone {
    worker: usize,
    block: WeightBlock,
    slices: Vec<WorkerSlice>,
    epochs: EpochLog,
    max_block_len: usize,
}

const PHASE_SGD: u8 = 0;
const PHASE_ACCUM: u8 = 1;

pub fn run_sync_with(data: &SparseDataset, cfg: &SyncConfig) -> Result<TrainOutput> {
    validate_run(data, cfg.n_workers, cfg.iterations, &cfg.hyper)?;
    let p_total = cfg.n_workers;
    let n_classes = data.n_classes();
    let rows = partition_rows(data.n_rows(), p_total)?;
    let class_ranges = contiguous_class_blocks(n_classes, p_total)?;

    // edge p -> (p+1) mod P; capacity 1 keeps at most one block in flight
    let mut txs: Vec<Option<SyncSender<WeightBlock>>> = (0..p_total).map(|_| None).collect();
    let mut rxs: Vec<Option<Receiver<WeightBlock>>> = (0..p_total).map(|_| None).collect();
    for p in 0..p_total {
        let (tx, rx) = sync_channel(1);
        txs[p] = Some(tx);
        rxs[(p + 1) % p_total] = Some(rx);
    }

    let start = Instant::now();
    let results: Vec<thread::Result<Result<WorkerDone>>> = thread::scope(|scope| {
        let mut handles = Vec::with_capacity(p_total);
        for p in 0..p_total {
            let tx = txs[p].take().expect("sender wired");
            let rx = rxs[p].take().expect("receiver wired");
            let block = WeightBlock::zeros(class_ranges[p].clone(), data.n_features());
            let row_range = rows.range(p);
            let cfg = cfg.clone();
            handles.push(scope.spawn(move || {
                worker_loop(data, &cfg, p, row_range, block, tx, rx, start)
            }));
        }
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut done = Vec::with_capacity(p_total);
    let mut ring_broken: Option<Error> = None;
    for r in results {
        match r {
            Ok(Ok(d)) => done.push(d),
            Ok(Err(e)) => match &e {
                // a neighbor dying severs the ring; prefer reporting the
                // original failure over the cascade
                Error::TokenIntegrity(msg) if msg.contains("ring severed") => {
                    ring_broken.get_or_insert(e);
                }
                _ => return Err(e),
            },
            Err(_) => return Err(Error::TokenIntegrity("worker panicked".into())),
        }
    }
    if let Some(e) = ring_broken {
        return Err(e);
    }
    done.sort_by_key(|d| d.worker);

    let stats = EngineStats {
        max_resident_vectors: done.iter().map(|d| d.max_block_len).collect(),
        ..EngineStats::default()
    };
    if cfg.check_invariants {
        verify_residency(&done, n_classes, p_total, cfg.iterations)?;
    }

    let pairs = done.iter().flat_map(|d| {
        d.block
            .classes
            .clone()
            .zip(d.block.vectors.iter().cloned())
    });
    let weights = DenseWeights::from_vectors(pairs, n_classes, data.n_features())?;
    let slices: Vec<Vec<WorkerSlice>> = done.into_iter().map(|d| d.slices).collect();
    let progress = assemble_records(&slices, cfg.hyper.lambda, data.n_rows(), cfg.iterations);
    Ok(TrainOutput {
        weights,
        progress,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    data: &SparseDataset,
    cfg: &SyncConfig,
    worker: usize,
    row_range: Range<usize>,
    mut block: WeightBlock,
    tx: SyncSender<WeightBlock>,
    rx: Receiver<WeightBlock>,
    start: Instant,
) -> Result<WorkerDone> {
    let n_classes = data.n_classes();
    let row_start = row_range.start;
    let n_local = row_range.len();
    let mut vs = VariationalState::new(n_local, n_classes);
    let mut acc = IterAccum::new(n_local);
    let mut rng = worker_rng(cfg.seed, worker);
    let mut slices = Vec::with_capacity(cfg.iterations);
    let mut epochs: EpochLog = Vec::new();
    let mut max_block_len = block.n_classes();

    let severed = || Error::TokenIntegrity(format!("ring severed at worker {worker}"));

    for t in 1..=cfg.iterations {
        let order = shuffled_order(n_local, &mut rng);
        for s in 0..cfg.n_workers {
            tx.send(block).map_err(|_| severed())?;
            block = rx.recv().map_err(|_| severed())?;
            max_block_len = max_block_len.max(block.n_classes());
            for (ci, k) in block.classes.clone().enumerate() {
                sgd_class_pass(
                    &mut block.vectors[ci],
                    k,
                    data,
                    row_start,
                    &order,
                    &vs,
                    t,
                    &cfg.hyper,
                    worker,
                )?;
            }
            if cfg.check_invariants {
                epochs.push((t, PHASE_SGD, s, block.classes.clone()));
            }
        }
        for s in 0..cfg.n_workers {
            tx.send(block).map_err(|_| severed())?;
            block = rx.recv().map_err(|_| severed())?;
            max_block_len = max_block_len.max(block.n_classes());
            for (ci, k) in block.classes.clone().enumerate() {
                absorb_class(&block.vectors[ci], k, data, row_start, &mut vs, &mut acc, worker)?;
            }
            if cfg.check_invariants {
                epochs.push((t, PHASE_ACCUM, s, block.classes.clone()));
            }
        }
        let (data_term, reg_sq) = refresh_and_slice(&mut vs, &mut acc, n_classes, row_start, worker)?;
        slices.push(WorkerSlice {
            iter: t as u64,
            data_term,
            reg_sq,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(WorkerDone {
        worker,
        block,
        slices,
        epochs,
        max_block_len,
    })
}

/// Post-run verification from the per-worker residency logs: at every inner
/// epoch the held blocks partition `[0, K)`, and within one iteration every
/// worker co-resides with every block exactly once per phase.
fn verify_residency(done: &[WorkerDone], n_classes: usize, p_total: usize, iterations: usize) -> Result<()> {
    for t in 1..=iterations {
        for phase in [PHASE_SGD, PHASE_ACCUM] {
            for s in 0..p_total {
                let mut held: Vec<usize> = Vec::with_capacity(n_classes);
                for d in done {
                    let range = d
                        .epochs
                        .iter()
                        .find(|(et, ep, es, _)| (*et, *ep, *es) == (t, phase, s))
                        .map(|(_, _, _, r)| r.clone())
                        .ok_or_else(|| {
                            Error::TokenIntegrity(format!(
                                "worker {} missing epoch log for t={t} phase={phase} s={s}",
                                d.worker
                            ))
                        })?;
                    held.extend(range);
                }
                held.sort_unstable();
                if held != (0..n_classes).collect::<Vec<_>>() {
                    return Err(Error::TokenIntegrity(format!(
                        "classes not conserved at t={t} phase={phase} epoch={s}"
                    )));
                }
            }
            // visit completeness: each worker held each block start once
            for d in done {
                let mut starts: Vec<usize> = d
                    .epochs
                    .iter()
                    .filter(|(et, ep, _, _)| *et == t && *ep == phase)
                    .map(|(_, _, _, r)| r.start)
                    .collect();
                starts.sort_unstable();
                starts.dedup();
                if starts.len() != p_total {
                    return Err(Error::TokenIntegrity(format!(
                        "worker {} visited {} distinct blocks at t={t} phase={phase}",
                        d.worker,
                        starts.len()
                    )));
                }
            }
        }
    }
    Ok(())
}
