//! Reference optimizers on the original objective: a single-threaded loop
//! with the same pass discipline as the multi-worker engines, and a
//! full-batch backtracking oracle that certifies the optimum they are
//! measured against.

use std::time::Instant;

use crate::data::SparseDataset;
use crate::engine::common::{
    absorb_class, assemble_records, refresh_and_slice, sgd_class_pass, shuffled_order,
    validate_run, worker_rng, EngineStats, IterAccum, TrainOutput, VariationalState, WorkerSlice,
};
use crate::error::{Error, Result};
use crate::math::{full_gradient_l1, objective_l1, Hyperparams};
use crate::metrics::{macro_f1, micro_f1, predict, ProgressRecord};
use crate::weights::{DenseWeights, WeightVector};

/// Optional test-set evaluation during a serial run. Labels must already be
/// mapped into the training label id space.
pub struct EvalPlan<'a> {
    pub every: usize,
    pub test: &'a SparseDataset,
}

/// One iteration: a shuffled stochastic pass over all (row, class) pairs
/// grouped by class, then a full accumulation pass and an exact refresh of
/// every variational value. Matches the multi-worker engines run at P = 1
/// update for update.
pub fn run_serial(
    data: &SparseDataset,
    iterations: usize,
    h: &Hyperparams,
    seed: u64,
) -> Result<TrainOutput> {
    run_serial_with(data, iterations, h, seed, None)
}

pub fn run_serial_with(
    data: &SparseDataset,
    iterations: usize,
    h: &Hyperparams,
    seed: u64,
    eval: Option<EvalPlan<'_>>,
) -> Result<TrainOutput> {
    validate_run(data, 1, iterations, h)?;
    let n_classes = data.n_classes();
    let n_rows = data.n_rows();
    let mut vectors: Vec<WeightVector> = (0..n_classes)
        .map(|_| WeightVector::zeros(data.n_features()))
        .collect();
    let mut vs = VariationalState::new(n_rows, n_classes);
    let mut acc = IterAccum::new(n_rows);
    let mut rng = worker_rng(seed, 0);
    let mut slices = Vec::with_capacity(iterations);
    let mut f1_at: Vec<(usize, f64, f64)> = Vec::new();
    let start = Instant::now();

    for t in 1..=iterations {
        let order = shuffled_order(n_rows, &mut rng);
        for (k, w) in vectors.iter_mut().enumerate() {
            sgd_class_pass(w, k, data, 0, &order, &vs, t, h, 0)?;
        }
        for (k, w) in vectors.iter().enumerate() {
            absorb_class(w, k, data, 0, &mut vs, &mut acc, 0)?;
        }
        let (data_term, reg_sq) = refresh_and_slice(&mut vs, &mut acc, n_classes, 0, 0)?;
        slices.push(WorkerSlice {
            iter: t as u64,
            data_term,
            reg_sq,
            seconds: start.elapsed().as_secs_f64(),
        });

        if let Some(plan) = &eval {
            if plan.every > 0 && t % plan.every == 0 {
                let w = assemble(&vectors, data.n_features())?;
                let preds = predict(&w, plan.test);
                let mac = macro_f1(&preds, plan.test.labels(), n_classes)?;
                let mic = micro_f1(&preds, plan.test.labels(), n_classes)?;
                f1_at.push((t, mac, mic));
            }
        }
    }

    let weights = assemble(&vectors, data.n_features())?;
    let mut progress = assemble_records(&[slices], h.lambda, n_rows, iterations);
    for (t, mac, mic) in f1_at {
        progress[t - 1].macro_f1 = mac;
        progress[t - 1].micro_f1 = mic;
    }
    Ok(TrainOutput {
        weights,
        progress,
        stats: EngineStats {
            max_resident_vectors: vec![n_classes],
            ..EngineStats::default()
        },
    })
}

fn assemble(vectors: &[WeightVector], n_features: usize) -> Result<DenseWeights> {
    DenseWeights::from_vectors(
        vectors.iter().cloned().enumerate(),
        vectors.len(),
        n_features,
    )
}

/// Full-batch gradient descent with Armijo backtracking.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Stop when the gradient's Euclidean norm falls below this.
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    pub initial_step: f64,
    /// Multiplicative step reduction while the Armijo test fails.
    pub backtrack_shrink: f64,
    /// Sufficient-decrease constant.
    pub armijo_c: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            grad_tolerance: 1e-6,
            max_iterations: 100_000,
            initial_step: 1.0,
            backtrack_shrink: 0.5,
            armijo_c: 1e-4,
        }
    }
}

impl OracleConfig {
    fn validate(&self) -> Result<()> {
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidConfig("oracle tolerance must be positive".into()));
        }
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(Error::InvalidConfig("backtracking shrink must be in (0,1)".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidConfig("initial step must be positive".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidConfig("Armijo constant must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct OracleResult {
    pub weights: DenseWeights,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub progress: Vec<ProgressRecord>,
}

/// Minimizes the original objective to the gradient tolerance. Requires a
/// strictly positive regularizer so the optimum is unique.
pub fn run_batch_oracle(
    data: &SparseDataset,
    h: &Hyperparams,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    h.validate()?;
    cfg.validate()?;
    if !(h.lambda > 0.0) {
        return Err(Error::InvalidConfig(
            "the batch oracle needs lambda > 0 for a unique optimum".into(),
        ));
    }
    let start = Instant::now();
    let mut w = DenseWeights::zeros(data.n_classes(), data.n_features());
    let mut f = objective_l1(&w, data, h)?;
    let mut step = cfg.initial_step;
    let mut progress = Vec::new();
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iterations {
        iterations = iter;
        let grad = full_gradient_l1(&w, data, h)?;
        let grad_sq = grad.norm_sq();
        grad_norm = grad_sq.sqrt();
        if grad_norm <= cfg.grad_tolerance {
            converged = true;
            iterations = iter - 1;
            break;
        }

        // warm-start from twice the last accepted step, capped by the
        // configured initial step
        step = (step * 2.0).min(cfg.initial_step);
        let mut accepted = false;
        while step > 1e-20 {
            let mut trial = w.clone();
            for k in 0..trial.n_classes() {
                for (tv, gv) in trial.class_mut(k).iter_mut().zip(grad.class(k)) {
                    *tv -= step * gv;
                }
            }
            let f_trial = objective_l1(&trial, data, h)?;
            if f_trial <= f - cfg.armijo_c * step * grad_sq {
                w = trial;
                f = f_trial;
                accepted = true;
                break;
            }
            step *= cfg.backtrack_shrink;
        }
        progress.push(ProgressRecord::new(
            iter as u64,
            f,
            start.elapsed().as_secs_f64(),
        ));
        if !accepted {
            // the line search bottomed out; no further progress possible
            break;
        }
    }

    Ok(OracleResult {
        weights: w,
        objective: f,
        grad_norm,
        iterations,
        converged,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    #[test]
    fn single_class_problem_is_solved_at_zero() {
        // with K=1 the partition term cancels the label term, leaving only
        // the regularizer: the optimum is W = 0 with objective 0
        let data = synthetic_dataset(10, 4, 1, 3);
        let h = Hyperparams::new(0.5, 1.0).unwrap();
        let r = run_batch_oracle(&data, &h, &OracleConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.objective.abs() < 1e-12);
        assert!(r.weights.norm_sq() < 1e-12);
    }

    #[test]
    fn returned_gradient_norm_is_within_tolerance() {
        let data = synthetic_dataset(40, 6, 3, 5);
        let h = Hyperparams::new(1e-2, 1.0).unwrap();
        let cfg = OracleConfig {
            grad_tolerance: 1e-7,
            ..Default::default()
        };
        let r = run_batch_oracle(&data, &h, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.grad_norm <= 1e-7);
        let grad = full_gradient_l1(&r.weights, &data, &h).unwrap();
        assert!(grad.norm_sq().sqrt() <= 1e-7);
    }

    #[test]
    fn lambda_zero_is_rejected() {
        let data = synthetic_dataset(10, 4, 2, 3);
        let h = Hyperparams::new(0.0, 1.0).unwrap();
        assert!(run_batch_oracle(&data, &h, &OracleConfig::default()).is_err());
    }

    #[test]
    fn max_iterations_exceeded_returns_best_iterate_unconverged() {
        let data = synthetic_dataset(40, 6, 3, 5);
        let h = Hyperparams::new(1e-4, 1.0).unwrap();
        let cfg = OracleConfig {
            grad_tolerance: 1e-14,
            max_iterations: 3,
            ..Default::default()
        };
        let r = run_batch_oracle(&data, &h, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.objective.is_finite());
    }

    #[test]
    fn running_minimum_of_the_serial_objective_is_non_increasing() {
        let data = synthetic_dataset(30, 5, 3, 11);
        let h = Hyperparams::new(1e-3, 0.5).unwrap();
        let out = run_serial(&data, 20, &h, 0).unwrap();
        let mut best = f64::INFINITY;
        for r in &out.progress {
            let new_best = best.min(r.objective);
            assert!(new_best <= best);
            best = new_best;
        }
        assert!(best < (3f64).ln()); // made progress from the zero model
    }

    #[test]
    fn eta0_zero_keeps_the_initialization() {
        let data = synthetic_dataset(12, 4, 3, 7);
        let h = Hyperparams::new(0.1, 0.0).unwrap();
        let out = run_serial(&data, 4, &h, 0).unwrap();
        assert_eq!(out.weights, DenseWeights::zeros(3, 4));
        for r in &out.progress {
            assert!((r.objective - 3f64.ln()).abs() < 1e-12);
        }
    }
}
