//! Mutual-information estimation: KSG estimators, sliced MI over random
//! projections, a PCA compression front-end, and Pearson correlation.

mod ksg;
mod pca;
mod pearson;
mod smi;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ksg::{ksg_mi_cc, ksg_mi_cd};
pub use pca::{fit_compressor, Compressor, CompressorKind};
pub use pearson::pearson;
pub use smi::{smi, ProjectionSet, SmiTarget};


/// `rows × cols` samples of a random vector, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows < 2 || cols < 1 {
            return Err(Error::InvalidArgument(format!(
                "sample matrix needs at least 2 rows and 1 column, got {rows}×{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}×{cols} matrix given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample value".into()));
        }
        Ok(SampleMatrix { rows, cols, values })
    }

    /// Flattens every leading-dimension slice of a batched tensor into a row.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let cols = if t.shape().len() == 1 { 1 } else { t.row_len() };
        SampleMatrix::new(t.rows(), cols, t.data().to_vec())
    }

    pub fn from_column(values: &[f64]) -> Result<Self> {
        SampleMatrix::new(values.len(), 1, values.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.values[i * self.cols + j] as f64)
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<SampleMatrix> {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        SampleMatrix::new(rows.len(), self.cols, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    KsgCc,
    KsgCd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats; may dip slightly below zero from estimator bias.
    pub value: f64,
    pub estimator: Estimator,
    pub k: usize,
    pub n: usize,
}
