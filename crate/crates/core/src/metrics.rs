//! Evaluation and progress logging: micro/macro F1, the rank CDF, and the
//! TSV progress format the plots consume.

use std::io::{BufRead, Write};

use crate::data::{SparseDataset, SparseRow};
use crate::error::{Error, Result};
use crate::math::{log_partition, sparse_dot};
use crate::weights::DenseWeights;

/// One progress log row. F1 fields are NaN when no test evaluation ran for
/// that iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressRecord {
    pub iter: u64,
    pub objective: f64,
    pub seconds: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

impl ProgressRecord {
    pub fn new(iter: u64, objective: f64, seconds: f64) -> Self {
        ProgressRecord {
            iter,
            objective,
            seconds,
            macro_f1: f64::NAN,
            micro_f1: f64::NAN,
        }
    }
}

pub type ProgressLog = Vec<ProgressRecord>;

/// Raw per-class scores `w_k . x`. The softmax is monotone, so ranking and
/// argmax work directly on these.
pub fn predict_scores(w: &DenseWeights, x: &SparseRow) -> Vec<f64> {
    w.classes().map(|row| sparse_dot(row, x)).collect()
}

/// Normalized class probabilities for one row.
pub fn predict_probabilities(w: &DenseWeights, x: &SparseRow) -> Vec<f64> {
    let lp = log_partition(w, x);
    w.classes()
        .map(|row| (sparse_dot(row, x) - lp).exp())
        .collect()
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Predicted class per dataset row.
pub fn predict(w: &DenseWeights, data: &SparseDataset) -> Vec<usize> {
    (0..data.n_rows())
        .map(|i| argmax(&predict_scores(w, data.row(i))))
        .collect()
}

fn confusion_counts(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<(Vec<u64>, Vec<u64>, Vec<u64>)> {
    if predictions.is_empty() {
        return Err(Error::Dimension("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::Dimension(format!(
                "class id out of range: prediction {p}, label {y}, K={n_classes}"
            )));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    Ok((tp, fp, fn_))
}

fn f1_from(tp: f64, fp: f64, fn_: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// F1 over the global confusion counts. For single-label multiclass data
/// this equals plain accuracy.
pub fn micro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let (tp, fp, fn_) = confusion_counts(predictions, labels, n_classes)?;
    let tp: u64 = tp.iter().sum();
    let fp: u64 = fp.iter().sum();
    let fn_: u64 = fn_.iter().sum();
    Ok(f1_from(tp as f64, fp as f64, fn_ as f64))
}

/// Unweighted mean of per-class F1. A class with no support and no
/// predictions contributes 0, not a skip.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let (tp, fp, fn_) = confusion_counts(predictions, labels, n_classes)?;
    let sum: f64 = (0..n_classes)
        .map(|k| f1_from(tp[k] as f64, fp[k] as f64, fn_[k] as f64))
        .sum();
    Ok(sum / n_classes as f64)
}

/// Rank of the true label under a score vector: 1 plus the number of
/// classes scoring strictly higher, plus equal-scoring classes with a lower
/// id.
pub fn label_rank(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    let mut rank = 1;
    for (k, &v) in scores.iter().enumerate() {
        if v > s || (v == s && k < label) {
            rank += 1;
        }
    }
    rank
}

/// For each r in 1..=K, the fraction of test points whose true label ranks
/// at or above r.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCdf {
    cumulative: Vec<f64>,
}

impl RankCdf {
    /// Builds from raw ranks in `[1, K]`.
    pub fn from_ranks(ranks: &[usize], n_classes: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Dimension("no ranks to accumulate".into()));
        }
        let mut counts = vec![0u64; n_classes];
        for &r in ranks {
            if r < 1 || r > n_classes {
                return Err(Error::Dimension(format!(
                    "rank {r} outside [1, {n_classes}]"
                )));
            }
            counts[r - 1] += 1;
        }
        let n = ranks.len() as f64;
        let mut cumulative = Vec::with_capacity(n_classes);
        let mut acc = 0u64;
        for c in counts {
            acc += c;
            cumulative.push(acc as f64 / n);
        }
        Ok(RankCdf { cumulative })
    }

    /// `P(rank <= r)`; `r` is 1-based.
    pub fn at(&self, r: usize) -> f64 {
        self.cumulative[r - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn n_classes(&self) -> usize {
        self.cumulative.len()
    }

    /// Non-decreasing with terminal value 1.
    pub fn is_valid(&self) -> bool {
        self.cumulative.windows(2).all(|w| w[0] <= w[1])
            && self.cumulative.last().is_some_and(|&v| (v - 1.0).abs() < 1e-12)
    }

    /// Two-column TSV: rank, cumulative fraction.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "rank\tcdf")?;
        for (i, v) in self.cumulative.iter().enumerate() {
            writeln!(out, "{}\t{}", i + 1, v)?;
        }
        Ok(())
    }
}

/// Rank CDF of the true labels under one score row per test point.
pub fn rank_cdf(score_rows: &[Vec<f64>], labels: &[usize]) -> Result<RankCdf> {
    if score_rows.is_empty() || score_rows.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score rows vs {} labels",
            score_rows.len(),
            labels.len()
        )));
    }
    let k = score_rows[0].len();
    let ranks: Vec<usize> = score_rows
        .iter()
        .zip(labels)
        .map(|(scores, &y)| label_rank(scores, y))
        .collect();
    RankCdf::from_ranks(&ranks, k)
}

const PROGRESS_HEADER: &str = "iter\tobjective\tseconds\tmacro_f1\tmicro_f1";

/// Writes the progress log as TSV with a fixed header.
pub fn write_progress<W: Write>(log: &[ProgressRecord], mut out: W) -> Result<()> {
    writeln!(out, "{PROGRESS_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.iter, r.objective, r.seconds, r.macro_f1, r.micro_f1
        )?;
    }
    Ok(())
}

/// Reads a progress log, enforcing strictly increasing iterations and
/// non-decreasing seconds.
pub fn read_progress<R: BufRead>(input: R) -> Result<ProgressLog> {
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == PROGRESS_HEADER => {}
        Some((_, Ok(h))) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {h:?}"),
            })
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(Error::Parse {
            line: 1,
            message: "empty progress file".into(),
        }),
    }
    let mut log = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 5 columns, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad number {s:?}"),
            })
        };
        let rec = ProgressRecord {
            iter: fields[0].parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad iteration {:?}", fields[0]),
            })?,
            objective: parse_f(fields[1])?,
            seconds: parse_f(fields[2])?,
            macro_f1: parse_f(fields[3])?,
            micro_f1: parse_f(fields[4])?,
        };
        if let Some(prev) = log.last() {
            let prev: &ProgressRecord = prev;
            if rec.iter <= prev.iter {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("iteration {} not increasing", rec.iter),
                });
            }
            if rec.seconds < prev.seconds {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("seconds {} decreased", rec.seconds),
                });
            }
        }
        log.push(rec);
    }
    Ok(log)
}

/// One `true_label predicted_label rank` line per test point, using the
/// model's label names where available.
pub fn write_predictions<W: Write>(
    mut out: W,
    true_names: &[String],
    predicted_names: &[String],
    ranks: &[usize],
) -> Result<()> {
    for ((t, p), r) in true_names.iter().zip(predicted_names).zip(ranks) {
        writeln!(out, "{t} {p} {r}")?;
    }
    Ok(())
}
