//! Sparse datasets and the LIBSVM text format.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One example: sorted feature ids with their values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseRow {
    /// Builds a row, enforcing strictly increasing indices and finite,
    /// nonzero values.
    pub fn new(indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} indices vs {} values",
                indices.len(),
                values.len()
            )));
        }
        for pair in indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Dimension(format!(
                    "feature indices not strictly increasing at {}..{}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v == 0.0) {
            return Err(Error::Dimension(format!("feature value {v} not finite and nonzero")));
        }
        Ok(SparseRow { indices, values })
    }

    pub fn empty() -> Self {
        SparseRow {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&j, &v)| (j as usize, v))
    }

    /// Largest feature index plus one, or 0 for an empty row.
    pub fn width(&self) -> usize {
        self.indices.last().map_or(0, |&j| j as usize + 1)
    }

    /// Drops coordinates at or beyond `n_features`; returns how many were cut.
    pub fn truncate_features(&mut self, n_features: usize) -> usize {
        let keep = self
            .indices
            .iter()
            .position(|&j| j as usize >= n_features)
            .unwrap_or(self.indices.len());
        let cut = self.indices.len() - keep;
        self.indices.truncate(keep);
        self.values.truncate(keep);
        cut
    }
}

/// Row-compressed sparse feature matrix with dense integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    rows: Vec<SparseRow>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
    /// Original label token per class id, in first-appearance order.
    label_names: Vec<String>,
}

impl SparseDataset {
    pub fn new(
        rows: Vec<SparseRow>,
        labels: Vec<usize>,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let names = (0..n_classes).map(|k| k.to_string()).collect();
        Self::with_label_names(rows, labels, n_features, n_classes, names)
    }

    pub fn with_label_names(
        rows: Vec<SparseRow>,
        labels: Vec<usize>,
        n_features: usize,
        n_classes: usize,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows vs {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if label_names.len() != n_classes {
            return Err(Error::Dimension(format!(
                "{} label names vs {} classes",
                label_names.len(),
                n_classes
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Dimension(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.width() > n_features) {
            return Err(Error::Dimension(format!(
                "row needs {} features but dataset declares {}",
                r.width(),
                n_features
            )));
        }
        Ok(SparseDataset {
            rows,
            labels,
            n_features,
            n_classes,
            label_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }
}

/// Options for [`parse_libsvm`].
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Feature ids in the file start at 0 instead of the LIBSVM default of 1.
    pub zero_based: bool,
    /// Force the feature count instead of inferring max index + 1.
    pub expected_features: Option<usize>,
}

/// A parsed dataset plus repair counters.
#[derive(Debug)]
pub struct ParseOutcome {
    pub dataset: SparseDataset,
    /// Rows whose feature indices arrived out of order and were sorted.
    pub reordered_rows: usize,
    /// Explicit zero feature values that were dropped.
    pub dropped_zeros: usize,
}

/// Parses `<label> <idx>:<val> ...` lines. Labels are remapped to a dense
/// id space in first-appearance order; the original tokens are retained in
/// the dataset's label names. Blank lines are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<ParseOutcome> {
    let offset = if opts.zero_based { 0 } else { 1 };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut max_index = 0usize;
    let mut reordered_rows = 0usize;
    let mut dropped_zeros = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue; // blank line
        };
        let label = match label_names.iter().position(|n| n == label_tok) {
            Some(id) => id,
            None => {
                label_names.push(label_tok.to_string());
                label_names.len() - 1
            }
        };

        let mut pairs: Vec<(u32, f64)> = Vec::new();
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("expected idx:value, got {tok:?}"),
            })?;
            let raw_idx: u64 = idx_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature index {idx_s:?}"),
            })?;
            if raw_idx < offset {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("feature index {raw_idx} below the index base {offset}"),
                });
            }
            let idx = (raw_idx - offset) as u32;
            let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature value {val_s:?}"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite feature value {val}"),
                });
            }
            if val == 0.0 {
                dropped_zeros += 1;
                continue;
            }
            pairs.push((idx, val));
        }

        if !pairs.windows(2).all(|w| w[0].0 < w[1].0) {
            pairs.sort_by_key(|&(j, _)| j);
            reordered_rows += 1;
            if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Parse {
                    line: lineno,
                    message: "duplicate feature index".into(),
                });
            }
        }
        if let Some(&(last, _)) = pairs.last() {
            max_index = max_index.max(last as usize);
        }
        let (indices, values) = pairs.into_iter().unzip();
        rows.push(SparseRow { indices, values });
        labels.push(label);
    }

    let inferred = if rows.iter().all(|r| r.nnz() == 0) {
        0
    } else {
        max_index + 1
    };
    let n_features = match opts.expected_features {
        Some(d) if d < inferred => {
            return Err(Error::Parse {
                line: 0,
                message: format!("data uses {inferred} features but {d} were expected"),
            })
        }
        Some(d) => d,
        None => inferred,
    };
    let n_classes = label_names.len();
    let dataset =
        SparseDataset::with_label_names(rows, labels, n_features, n_classes, label_names)?;
    Ok(ParseOutcome {
        dataset,
        reordered_rows,
        dropped_zeros,
    })
}

pub fn parse_libsvm_file<P: AsRef<Path>>(path: P, opts: &ParseOptions) -> Result<ParseOutcome> {
    parse_libsvm(BufReader::new(File::open(path)?), opts)
}

/// Writes the dataset back out in LIBSVM text form, using the original
/// label tokens. `f64` display formatting round-trips exactly.
pub fn write_libsvm<W: Write>(ds: &SparseDataset, mut out: W, zero_based: bool) -> Result<()> {
    let offset = if zero_based { 0 } else { 1 };
    for i in 0..ds.n_rows() {
        write!(out, "{}", ds.label_names()[ds.label(i)])?;
        for (j, v) in ds.row(i).iter() {
            write!(out, " {}:{}", j + offset, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Seeded near-separable classification data: one random unit center per
/// class, rows drawn as a center plus small noise. Every generated value is
/// nonzero so rows are fully dense in the `n_features` coordinates.
pub fn synthetic_dataset(
    n_rows: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
) -> SparseDataset {
    assert!(n_classes >= 1 && n_features >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_5e_5e);
    let mut centers = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut c: Vec<f64> = (0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        c.iter_mut().for_each(|v| *v /= norm);
        centers.push(c);
    }
    let mut rows = Vec::with_capacity(n_rows);
    let mut labels = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let k = i % n_classes;
        let mut vals: Vec<f64> = centers[k]
            .iter()
            .map(|&c| {
                let v = c + 0.15 * rng.random_range(-1.0..1.0);
                if v == 0.0 {
                    1e-6
                } else {
                    v
                }
            })
            .collect();
        // keep feature magnitudes bounded so dot products stay modest
        for v in vals.iter_mut() {
            *v = v.clamp(-2.0, 2.0);
        }
        let indices = (0..n_features as u32).collect();
        rows.push(SparseRow::new(indices, vals).expect("synthetic row is valid"));
        labels.push(k);
    }
    SparseDataset::new(rows, labels, n_features, n_classes).expect("synthetic dataset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn parses_one_based_line() {
        let out = parse_libsvm(Cursor::new("2 1:0.5 3:1.0\n"), &ParseOptions::default()).unwrap();
        let ds = &out.dataset;
        assert_eq!(ds.n_rows(), 1);
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.label_names()[0], "2");
        assert_eq!(ds.row(0).indices(), &[0, 2]);
        assert_eq!(ds.row(0).values(), &[0.5, 1.0]);
        assert_eq!(ds.n_features(), 3);
    }

    #[test]
    fn parses_zero_based_line() {
        let opts = ParseOptions {
            zero_based: true,
            ..Default::default()
        };
        let out = parse_libsvm(Cursor::new("a 0:1 2:2\n"), &opts).unwrap();
        assert_eq!(out.dataset.row(0).indices(), &[0, 2]);
    }

    #[test]
    fn empty_feature_list_is_a_valid_row() {
        let out = parse_libsvm(Cursor::new("1\n1 1:2.0\n"), &ParseOptions::default()).unwrap();
        assert_eq!(out.dataset.n_rows(), 2);
        assert_eq!(out.dataset.row(0).nnz(), 0);
        assert_eq!(out.dataset.n_classes(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_libsvm(Cursor::new("1 1:1\n2 oops\n"), &ParseOptions::default())
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn out_of_order_indices_are_sorted_and_counted() {
        let out = parse_libsvm(Cursor::new("1 3:1 1:2\n"), &ParseOptions::default()).unwrap();
        assert_eq!(out.reordered_rows, 1);
        assert_eq!(out.dataset.row(0).indices(), &[0, 2]);
        assert_eq!(out.dataset.row(0).values(), &[2.0, 1.0]);
    }

    #[test]
    fn duplicate_index_is_an_error() {
        assert!(parse_libsvm(Cursor::new("1 2:1 2:4\n"), &ParseOptions::default()).is_err());
    }

    #[test]
    fn explicit_zero_values_are_dropped() {
        let out = parse_libsvm(Cursor::new("1 1:0 2:3\n"), &ParseOptions::default()).unwrap();
        assert_eq!(out.dropped_zeros, 1);
        assert_eq!(out.dataset.row(0).indices(), &[1]);
    }

    #[test]
    fn labels_are_remapped_in_first_appearance_order() {
        let text = "7 1:1\n-1 1:1\n7 2:1\n";
        let out = parse_libsvm(Cursor::new(text), &ParseOptions::default()).unwrap();
        assert_eq!(out.dataset.labels(), &[0, 1, 0]);
        assert_eq!(out.dataset.label_names(), &["7", "-1"]);
    }

    #[test]
    fn expected_features_too_small_is_an_error() {
        let opts = ParseOptions {
            expected_features: Some(2),
            ..Default::default()
        };
        assert!(parse_libsvm(Cursor::new("1 3:1\n"), &opts).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let ds = synthetic_dataset(17, 5, 3, 99);
        let mut buf = Vec::new();
        write_libsvm(&ds, &mut buf, false).unwrap();
        let back = parse_libsvm(Cursor::new(buf), &ParseOptions::default()).unwrap();
        // synthetic label names are "0","1","2" and appear in row order, so
        // the remap preserves ids
        assert_eq!(back.dataset, ds);
    }

    #[test]
    fn row_rejects_unsorted_zero_and_nan() {
        assert!(SparseRow::new(vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseRow::new(vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseRow::new(vec![0], vec![0.0]).is_err());
        assert!(SparseRow::new(vec![0], vec![f64::NAN]).is_err());
    }

    #[test]
    fn dataset_validates_labels_and_width() {
        let row = SparseRow::new(vec![4], vec![1.0]).unwrap();
        assert!(SparseDataset::new(vec![row.clone()], vec![0], 5, 1).is_ok());
        assert!(SparseDataset::new(vec![row.clone()], vec![1], 5, 1).is_err());
        assert!(SparseDataset::new(vec![row], vec![0], 4, 1).is_err());
    }
}
