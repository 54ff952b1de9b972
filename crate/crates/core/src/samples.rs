use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// A list of equal-length sample vectors stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "sample buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(SampleSet { dim, data })
    }

    pub fn with_capacity(dim: usize, count: usize) -> Self {
        SampleSet {
            dim,
            data: Vec::with_capacity(dim * count),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::dim("rows must be non-empty and of equal length"));
        }
        Ok(SampleSet {
            dim,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_vectors(rows: &[Vector]) -> Result<Self> {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().copied().collect()).collect();
        Self::from_rows(&v)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn vector(&self, i: usize) -> Vector {
        Vector::from_column_slice(self.row(i))
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row dimension");
        self.data.extend_from_slice(row);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    /// Keeps only the listed coordinates, in order.
    pub fn project(&self, components: &[usize]) -> Result<SampleSet> {
        if components.is_empty() || components.iter().any(|&c| c >= self.dim) {
            return Err(Error::dim(format!(
                "projection {components:?} invalid for dimension {}",
                self.dim
            )));
        }
        let mut out = SampleSet::with_capacity(components.len(), self.len());
        for r in self.rows() {
            out.data.extend(components.iter().map(|&c| r[c]));
        }
        Ok(out)
    }

    /// Rows at the given indices.
    pub fn select(&self, idx: &[usize]) -> SampleSet {
        let mut out = SampleSet::with_capacity(self.dim, idx.len());
        for &i in idx {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim);
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        m / self.len().max(1) as f64
    }
}
