//! Per-block prediction maps shared by the head and the losses.

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

/// Column sums of a probability map must be within this of 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("probability column ({i}, {j}) sums to {sum}")]
    NotNormalized { i: usize, j: usize, sum: f64 },
    #[error("negative or non-finite probability at ({k}, {i}, {j})")]
    InvalidEntry { k: usize, i: usize, j: usize },
}

/// `n x h x w` categorical distributions, one per block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Array3<f64>);

impl ProbabilityMap {
    pub fn new(values: Array3<f64>) -> Result<Self, MapError> {
        for ((k, i, j), &v) in values.indexed_iter() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MapError::InvalidEntry { k, i, j });
            }
        }
        let sums = values.sum_axis(Axis(0));
        for ((i, j), &sum) in sums.indexed_iter() {
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(MapError::NotNormalized { i, j, sum });
            }
        }
        Ok(ProbabilityMap(values))
    }

    /// Skips validation; callers guarantee normalized columns.
    pub(crate) fn from_softmax(values: Array3<f64>) -> Self {
        ProbabilityMap(values)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.dim().0
    }

    /// Spatial shape `(h, w)`.
    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    pub fn argmax(&self) -> Array2<usize> {
        let (n, h, w) = self.0.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            (0..n)
                .max_by(|&a, &b| self.0[[a, i, j]].total_cmp(&self.0[[b, i, j]]))
                .unwrap_or(0)
        })
    }
}

/// Per-block expected counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(pub Array2<f64>);

impl DensityMap {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Predicted global count.
    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = Array3::from_shape_vec((2, 1, 1), vec![0.25, 0.75]).unwrap();
        assert!(ProbabilityMap::new(ok).is_ok());
        let bad = Array3::from_shape_vec((2, 1, 1), vec![0.25, 0.5]).unwrap();
        assert!(matches!(
            ProbabilityMap::new(bad),
            Err(MapError::NotNormalized { .. })
        ));
        let neg = Array3::from_shape_vec((2, 1, 1), vec![-0.25, 1.25]).unwrap();
        assert!(matches!(
            ProbabilityMap::new(neg),
            Err(MapError::InvalidEntry { .. })
        ));
    }
}
