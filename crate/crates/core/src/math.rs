//! Objective, gradient, and update formulas.
//!
//! The softmax objective over K classes couples every class vector through
//! the log-partition term. Introducing one variational value per row
//! (`b_i`, the negated log partition) splits the objective into a double
//! sum over rows and classes, which is what lets the engines update
//! disjoint (row block, class) pairs independently. Everything here is a
//! pure function over caller-owned values; single-writer discipline for
//! each class vector is the engines' job.

use crate::data::{SparseDataset, SparseRow};
use crate::error::{Error, Result};
use crate::weights::{DenseWeights, WeightVector};

/// Largest exp() argument we accept before declaring overflow.
const EXP_ARG_LIMIT: f64 = 709.0;

/// Step-size schedule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepSchedule {
    /// eta0 / sqrt(t) with t the outer-iteration index (1-based).
    #[default]
    InvSqrt,
    /// eta0 for every iteration.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda: f64,
    pub eta0: f64,
    pub schedule: StepSchedule,
}

impl Hyperparams {
    pub fn new(lambda: f64, eta0: f64) -> Result<Self> {
        let h = Hyperparams {
            lambda,
            eta0,
            schedule: StepSchedule::InvSqrt,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        // eta0 == 0 is allowed: it turns every update into a no-op, which
        // the engine tests rely on.
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta0 must be finite and >= 0, got {}",
                self.eta0
            )));
        }
        Ok(())
    }

    /// Step size for outer iteration `t` (1-based).
    pub fn step_size(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        match self.schedule {
            StepSchedule::InvSqrt => self.eta0 / (t as f64).sqrt(),
            StepSchedule::Constant => self.eta0,
        }
    }
}

/// Dot product of a dense vector with a sparse row.
///
/// Callers must guarantee every index of `x` is below `w.len()`; datasets
/// and models are validated against each other at the API boundaries.
pub fn sparse_dot(w: &[f64], x: &SparseRow) -> f64 {
    debug_assert!(x.width() <= w.len(), "sparse row wider than weight vector");
    let mut acc = 0.0;
    for (j, v) in x.iter() {
        acc += w[j] * v;
    }
    acc
}

/// Max-shifted log(sum(exp(vals))); never overflows for finite inputs.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    debug_assert!(!vals.is_empty());
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = vals.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// log sum_k exp(w_k . x), computed via the max shift.
pub fn log_partition(w: &DenseWeights, x: &SparseRow) -> f64 {
    debug_assert!(w.n_classes() >= 1);
    let dots: Vec<f64> = w.classes().map(|row| sparse_dot(row, x)).collect();
    log_sum_exp(&dots)
}

fn check_dims(w: &DenseWeights, data: &SparseDataset) -> Result<()> {
    if w.n_classes() != data.n_classes() {
        return Err(Error::Dimension(format!(
            "model has {} classes, data has {}",
            w.n_classes(),
            data.n_classes()
        )));
    }
    if w.n_features() != data.n_features() {
        return Err(Error::Dimension(format!(
            "model has {} features, data has {}",
            w.n_features(),
            data.n_features()
        )));
    }
    Ok(())
}

/// The original regularized negative log-likelihood:
/// (lambda/2) sum_k |w_k|^2 - (1/N) sum_i w_{y_i}.x_i + (1/N) sum_i log-partition_i.
pub fn objective_l1(w: &DenseWeights, data: &SparseDataset, h: &Hyperparams) -> Result<f64> {
    check_dims(w, data)?;
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::Dimension("empty dataset".into()));
    }
    let reg = 0.5 * h.lambda * w.norm_sq();
    let mut dots = vec![0.0; w.n_classes()];
    let mut data_term = 0.0;
    for i in 0..n {
        let x = data.row(i);
        for (k, row) in w.classes().enumerate() {
            dots[k] = sparse_dot(row, x);
        }
        data_term += log_sum_exp(&dots) - dots[data.label(i)];
    }
    Ok(reg + data_term / n as f64)
}

/// The doubly-separable form: sum over rows i and classes k of
///
/// ```text
/// f_ki = ( lambda/2 |w_k|^2 - y_ik w_k.x_i + exp(w_k.x_i + b_i) - b_i/K - 1/K ) / N
/// ```
///
/// Equals [`objective_l1`] when every `b_i` sits at its closed-form optimum
/// (the negated log partition of row i), and is strictly convex in each
/// `b_i` with exactly that minimizer. The exponential sum per row is
/// evaluated through a single shifted exp so moderate departures of `b`
/// from the optimum stay representable.
pub fn objective_l2(
    w: &DenseWeights,
    b: &[f64],
    data: &SparseDataset,
    h: &Hyperparams,
) -> Result<f64> {
    check_dims(w, data)?;
    let n = data.n_rows();
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "{} variational values for {} rows",
            b.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Dimension("empty dataset".into()));
    }
    let nf = n as f64;
    let reg = 0.5 * h.lambda * w.norm_sq();
    let mut dots = vec![0.0; w.n_classes()];
    let mut total = reg;
    for i in 0..n {
        let x = data.row(i);
        for (k, row) in w.classes().enumerate() {
            dots[k] = sparse_dot(row, x);
        }
        let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: f64 = dots.iter().map(|&d| (d - m).exp()).sum();
        // sum_k exp(dot_k + b_i) without leaving the representable range;
        // the trailing -1 is the row's share of the -1/K constants
        let exp_sum = (b[i] + m + shifted.ln()).exp();
        total += (exp_sum - 1.0 - dots[data.label(i)] - b[i]) / nf;
    }
    Ok(total)
}

/// Closed-form refresh of a variational value from its linear-domain
/// accumulator: returns -log(partial_sum).
pub fn refresh_b(partial_sum: f64) -> Result<f64> {
    if !(partial_sum > 0.0) || !partial_sum.is_finite() {
        return Err(Error::NonPositivePartialSum { value: partial_sum });
    }
    Ok(-partial_sum.ln())
}

/// One stochastic update of a class vector against one row:
///
/// ```text
/// w_k <- w_k - eta_t K (lambda w_k - y_ik x_i + exp(w_k.x_i + b_i) x_i)
/// ```
///
/// The regularizer shrink is a scalar on the deferred scale, so the touched
/// coordinates are exactly those of `x`; with lambda = 0 every other
/// coordinate is bit-identical afterwards.
pub fn sgd_update(
    w: &mut WeightVector,
    x: &SparseRow,
    y_ik: bool,
    b_i: f64,
    t: usize,
    h: &Hyperparams,
    n_classes: usize,
) -> Result<()> {
    debug_assert!(b_i.is_finite());
    let eta_k = h.step_size(t) * n_classes as f64;
    let dot = w.dot(x);
    let arg = dot + b_i;
    if arg > EXP_ARG_LIMIT {
        return Err(Error::ExpOverflow { dot, arg });
    }
    let coeff = eta_k * (f64::from(y_ik) - arg.exp());
    w.shrink(1.0 - eta_k * h.lambda);
    if x.nnz() > 0 && coeff != 0.0 {
        w.add_scaled_sparse(x, coeff);
    }
    Ok(())
}

/// Gradient of one row's loss taken at `w` with the variational value held
/// at `b_i`. With `b_i` at its optimum this is the exact gradient of
///
/// ```text
/// f_i(W) = lambda/2 |W|^2 - w_{y}.x + log sum_k exp(w_k.x)
/// ```
pub fn gradient_fi_with_b(
    w: &DenseWeights,
    x: &SparseRow,
    y: usize,
    b_i: f64,
    lambda: f64,
) -> DenseWeights {
    let mut grad = DenseWeights::zeros(w.n_classes(), w.n_features());
    for k in 0..w.n_classes() {
        let dot = sparse_dot(w.class(k), x);
        let softmax = (dot + b_i).exp();
        let g = grad.class_mut(k);
        for (j, wv) in w.class(k).iter().enumerate() {
            g[j] = lambda * wv;
        }
        for (j, v) in x.iter() {
            g[j] += (softmax - f64::from(k == y)) * v;
        }
    }
    grad
}

/// Exact per-row gradient via the variational form: the caller supplies the
/// optimal `b_i = -log_partition(w, x)`.
pub fn exact_gradient_fi(
    w: &DenseWeights,
    x: &SparseRow,
    y: usize,
    b_i: f64,
    lambda: f64,
) -> DenseWeights {
    gradient_fi_with_b(w, x, y, b_i, lambda)
}

/// Euclidean norm of the gap between the gradient at `w_now` computed with
/// the stale variational value of `w_stale`, and the exact gradient at
/// `w_now`. The regularizer cancels in the difference, so no lambda is
/// needed.
pub fn approx_gradient_error(
    w_now: &DenseWeights,
    w_stale: &DenseWeights,
    x: &SparseRow,
    y: usize,
) -> f64 {
    let b_stale = -log_partition(w_stale, x);
    let b_now = -log_partition(w_now, x);
    let approx = gradient_fi_with_b(w_now, x, y, b_stale, 0.0);
    let exact = gradient_fi_with_b(w_now, x, y, b_now, 0.0);
    let mut sq = 0.0;
    for k in 0..w_now.n_classes() {
        for (a, e) in approx.class(k).iter().zip(exact.class(k)) {
            let d = a - e;
            sq += d * d;
        }
    }
    sq.sqrt()
}

/// Full-batch gradient of [`objective_l1`].
pub fn full_gradient_l1(
    w: &DenseWeights,
    data: &SparseDataset,
    h: &Hyperparams,
) -> Result<DenseWeights> {
    check_dims(w, data)?;
    let n = data.n_rows() as f64;
    let mut grad = DenseWeights::zeros(w.n_classes(), w.n_features());
    for k in 0..w.n_classes() {
        let g = grad.class_mut(k);
        for (j, wv) in w.class(k).iter().enumerate() {
            g[j] = h.lambda * wv;
        }
    }
    let mut dots = vec![0.0; w.n_classes()];
    for i in 0..data.n_rows() {
        let x = data.row(i);
        for (k, row) in w.classes().enumerate() {
            dots[k] = sparse_dot(row, x);
        }
        let lse = log_sum_exp(&dots);
        for k in 0..w.n_classes() {
            let coef = ((dots[k] - lse).exp() - f64::from(k == data.label(i))) / n;
            let g = grad.class_mut(k);
            for (j, v) in x.iter() {
                g[j] += coef * v;
            }
        }
    }
    Ok(grad)
}
