//! PCA compression of input samples to a low-dimensional embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::SampleMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorKind {
    Pca,
    /// Inputs are already embeddings; compression is the identity.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compressor {
    pub kind: CompressorKind,
    pub mean: Vec<f64>,
    /// `d_E` rows of length `d`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub dim: usize,
}

const RANK_TOL: f64 = 1e-10;

pub fn fit_compressor(inputs: &SampleMatrix, d_e: usize) -> Result<Compressor> {
    let (n, d) = (inputs.rows(), inputs.cols());
    if d_e == 0 || d_e > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "d_E = {d_e} must lie in 1..={}",
            n.min(d)
        )));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(inputs.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for (j, &v) in inputs.row(i).iter().enumerate() {
            centered[(i, j)] = v as f64 - mean[j];
        }
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count();
    if d_e > rank {
        return Err(Error::InvalidArgument(format!(
            "d_E = {d_e} exceeds the numerical rank {rank} of the inputs; use d_E <= {rank}"
        )));
    }

    let mut components = Vec::with_capacity(d_e);
    let mut eigenvalues = Vec::with_capacity(d_e);
    for &c in order.iter().take(d_e) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[c]);
    }
    Ok(Compressor {
        kind: CompressorKind::Pca,
        mean,
        components,
        eigenvalues,
        dim: d_e,
    })
}

impl Compressor {
    pub fn precomputed(dim: usize) -> Self {
        Compressor {
            kind: CompressorKind::Precomputed,
            mean: Vec::new(),
            components: Vec::new(),
            eigenvalues: Vec::new(),
            dim,
        }
    }

    pub fn compress(&self, inputs: &SampleMatrix) -> Result<SampleMatrix> {
        match self.kind {
            CompressorKind::Precomputed => {
                if inputs.cols() != self.dim {
                    return Err(Error::InvalidArgument(format!(
                        "embedding has {} columns, expected {}",
                        inputs.cols(),
                        self.dim
                    )));
                }
                Ok(inputs.clone())
            }
            CompressorKind::Pca => {
                if inputs.cols() != self.mean.len() {
                    return Err(Error::InvalidArgument(format!(
                        "compressor fitted on {} features, got {}",
                        self.mean.len(),
                        inputs.cols()
                    )));
                }
                let mut out = Vec::with_capacity(inputs.rows() * self.dim);
                for i in 0..inputs.rows() {
                    let row = inputs.row(i);
                    for c in &self.components {
                        let s = row
                            .iter()
                            .zip(&self.mean)
                            .zip(c)
                            .fold(0.0f64, |acc, ((&x, &m), &w)| acc + (x as f64 - m) * w);
                        out.push(s as f32);
                    }
                }
                SampleMatrix::new(inputs.rows(), self.dim, out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_reconstructs() {
        let dir = [0.6f32, -0.8, 0.0];
        let mut values = Vec::new();
        for t in [-2.0f32, -1.0, 0.5, 1.5, 3.0] {
            values.extend(dir.iter().map(|d| d * t + 1.0));
        }
        let m = SampleMatrix::new(5, 3, values.clone()).unwrap();
        let c = fit_compressor(&m, 1).unwrap();
        let z = c.compress(&m).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let rec = c.mean[j] + z.row(i)[0] as f64 * c.components[0][j];
                assert!((rec - values[i * 3 + j] as f64).abs() < 1e-5);
            }
        }
        assert!(c.components[0][1] > 0.0);
        assert!(fit_compressor(&m, 2).unwrap_err().to_string().contains("rank 1"));
    }

    #[test]
    fn oversized_target_rejected() {
        let m = SampleMatrix::new(3, 2, vec![0.0, 1.0, 2.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(fit_compressor(&m, 3).is_err());
        assert!(fit_compressor(&m, 0).is_err());
    }
}
