//! Class weight vectors and the model checkpoint format.
//!
//! Per-class vectors use a deferred scale factor so the regularizer shrink
//! in each stochastic update costs O(1) instead of O(D); the factor is
//! folded into the stored values only when it drifts toward the underflow
//! range.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::SparseRow;
use crate::error::{Error, Result};

/// When `|scale|` drops below this, the factor is folded into the values.
const SCALE_FOLD_THRESHOLD: f64 = 1e-100;

/// One class weight vector stored as `scale * values`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    scale: f64,
    values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(n_features: usize) -> Self {
        WeightVector {
            scale: 1.0,
            values: vec![0.0; n_features],
        }
    }

    pub fn from_dense(values: Vec<f64>) -> Self {
        WeightVector { scale: 1.0, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Effective dot product with a sparse row.
    pub fn dot(&self, x: &SparseRow) -> f64 {
        self.scale * crate::math::sparse_dot(&self.values, x)
    }

    /// Effective squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.scale * self.scale * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    /// Multiplies the whole vector by `factor` in O(1). A zero factor
    /// densifies so later sparse updates stay well-defined.
    pub fn shrink(&mut self, factor: f64) {
        if factor == 0.0 {
            self.values.fill(0.0);
            self.scale = 1.0;
            return;
        }
        self.scale *= factor;
        if self.scale.abs() < SCALE_FOLD_THRESHOLD {
            self.fold();
        }
    }

    /// Adds `coeff * x` to the effective vector, touching only `x`'s
    /// coordinates.
    pub fn add_scaled_sparse(&mut self, x: &SparseRow, coeff: f64) {
        let inner = coeff / self.scale;
        for (j, v) in x.iter() {
            self.values[j] += inner * v;
        }
    }

    /// Folds the scale into the stored values.
    pub fn fold(&mut self) {
        if self.scale != 1.0 {
            let s = self.scale;
            self.values.iter_mut().for_each(|v| *v *= s);
            self.scale = 1.0;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v * self.scale).collect()
    }
}

/// The full K x D parameter matrix, rows indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights {
    n_classes: usize,
    n_features: usize,
    values: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(n_classes: usize, n_features: usize) -> Self {
        DenseWeights {
            n_classes,
            n_features,
            values: vec![0.0; n_classes * n_features],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_classes = rows.len();
        let n_features = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(n_classes * n_features);
        for row in &rows {
            if row.len() != n_features {
                return Err(Error::Dimension(format!(
                    "class vector length {} differs from {}",
                    row.len(),
                    n_features
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Dimension(format!("non-finite weight {v}")));
            }
            values.extend_from_slice(row);
        }
        Ok(DenseWeights {
            n_classes,
            n_features,
            values,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn class(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_features..(k + 1) * self.n_features]
    }

    pub fn class_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_features..(k + 1) * self.n_features]
    }

    pub fn classes(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_features)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Splits into per-class scaled vectors (class id order).
    pub fn to_vectors(&self) -> Vec<WeightVector> {
        self.classes()
            .map(|row| WeightVector::from_dense(row.to_vec()))
            .collect()
    }

    /// Rebuilds from `(class id, vector)` pairs; every class must appear
    /// exactly once.
    pub fn from_vectors(
        pairs: impl IntoIterator<Item = (usize, WeightVector)>,
        n_classes: usize,
        n_features: usize,
    ) -> Result<Self> {
        let mut w = DenseWeights::zeros(n_classes, n_features);
        let mut seen = vec![false; n_classes];
        for (k, v) in pairs {
            if k >= n_classes {
                return Err(Error::TokenIntegrity(format!("class {k} out of range")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::TokenIntegrity(format!("class {k} recovered twice")));
            }
            if v.len() != n_features {
                return Err(Error::Dimension(format!(
                    "class {k} vector has {} features, expected {n_features}",
                    v.len()
                )));
            }
            w.class_mut(k).copy_from_slice(&v.to_dense());
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::TokenIntegrity(format!("class {k} missing")));
        }
        Ok(w)
    }
}

/// A trained model: weights plus the label map and training metadata needed
/// to evaluate it later.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: DenseWeights,
    pub label_names: Vec<String>,
    pub lambda: f64,
    pub n_train_rows: u64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSMLRCK1";

impl Checkpoint {
    /// Binary layout, all integers and floats little-endian:
    ///
    /// ```text
    /// magic      8 bytes  "DSMLRCK1"
    /// n_rows     u64      training rows (N)
    /// n_features u64      D
    /// n_classes  u64      K
    /// lambda     f64
    /// labels     K times: u32 byte length, then that many UTF-8 bytes
    /// weights    K * D f64, class-major
    /// ```
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&self.n_train_rows.to_le_bytes())?;
        out.write_all(&(self.weights.n_features() as u64).to_le_bytes())?;
        out.write_all(&(self.weights.n_classes() as u64).to_le_bytes())?;
        out.write_all(&self.lambda.to_le_bytes())?;
        for name in &self.label_names {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
        }
        for v in &self.weights.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.save(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n_train_rows = read_u64(&mut input)?;
        let n_features = read_u64(&mut input)? as usize;
        let n_classes = read_u64(&mut input)? as usize;
        let lambda = f64::from_le_bytes(read_bytes::<8, _>(&mut input)?);
        let mut label_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = u32::from_le_bytes(read_bytes::<4, _>(&mut input)?) as usize;
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            label_names.push(
                String::from_utf8(buf)
                    .map_err(|_| Error::Checkpoint("label name is not UTF-8".into()))?,
            );
        }
        let mut values = vec![0.0f64; n_classes * n_features];
        for v in values.iter_mut() {
            *v = f64::from_le_bytes(read_bytes::<8, _>(&mut input)?);
        }
        Ok(Checkpoint {
            weights: DenseWeights {
                n_classes,
                n_features,
                values,
            },
            label_names,
            lambda,
            n_train_rows,
        })
    }

    pub fn load_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes::<8, _>(input)?))
}

fn read_bytes<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}
