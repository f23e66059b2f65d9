//! Row-major point sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// A set of `len()` points in `R^dim`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(LabError::InvalidParameter("point dimension must be >= 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(LabError::Format(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| LabError::Empty("no rows to build a point set from".into()))?;
        let dim = first.as_ref().len();
        let mut out = Self::with_capacity(dim, rows.len());
        for r in rows {
            out.push(r.as_ref())?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    pub fn extend(&mut self, other: &Points) -> Result<()> {
        if other.dim != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Subset of rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Points {
        let mut out = Points::with_capacity(self.dim, indices.len());
        for &i in indices {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len().max(1) as f64;
        let mut m = DVector::zeros(self.dim);
        for r in self.rows() {
            for (k, v) in r.iter().enumerate() {
                m[k] += v;
            }
        }
        m / n
    }

    /// Biased (1/N) sample covariance about the sample mean.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        let n = self.len().max(1) as f64;
        let m = self.mean();
        let mut c = DMatrix::zeros(d, d);
        for r in self.rows() {
            for i in 0..d {
                let di = r[i] - m[i];
                for j in i..d {
                    c[(i, j)] += di * (r[j] - m[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = c[(i, j)] / n;
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }

    /// SHA-256 over the little-endian bytes of dim and every coordinate.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_small_set() {
        let p = Points::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(p.mean().as_slice(), &[0.0, 0.0]);
        let c = p.covariance();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 1)], 0.0);
        assert_eq!(c[(0, 1)], 0.0);
    }

    #[test]
    fn push_rejects_wrong_dimension() {
        let mut p = Points::new(2);
        assert!(matches!(
            p.push(&[1.0]),
            Err(LabError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }
}
