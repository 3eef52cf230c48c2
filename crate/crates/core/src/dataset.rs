//! Column-oriented view of exposures for training and scoring.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::synthgen::{Exposure, QueryGroup, FEATURE_DIM};

/// Width of a model input row: user features followed by item features.
pub const INPUT_DIM: usize = 2 * FEATURE_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    positions: Vec<usize>,
    labels: Array1<f64>,
    true_pctr: Array1<f64>,
    k: usize,
}

impl Dataset {
    pub fn from_exposures<'a>(exposures: impl IntoIterator<Item = &'a Exposure>, k: usize) -> Result<Self> {
        let exposures: Vec<&Exposure> = exposures.into_iter().collect();
        let n = exposures.len();
        let mut features = Array2::zeros((n, INPUT_DIM));
        let mut positions = Vec::with_capacity(n);
        let mut labels = Array1::zeros(n);
        let mut true_pctr = Array1::zeros(n);
        for (i, e) in exposures.iter().enumerate() {
            if e.position >= k {
                return Err(Error::PositionOutOfRange {
                    position: e.position,
                    k,
                });
            }
            let mut row = features.row_mut(i);
            for (dst, src) in row
                .iter_mut()
                .zip(e.user_features.as_slice().iter().chain(e.item_features.as_slice()))
            {
                *dst = *src;
            }
            positions.push(e.position);
            labels[i] = f64::from(e.label);
            true_pctr[i] = e.true_pctr;
        }
        Ok(Self {
            features,
            positions,
            labels,
            true_pctr,
            k,
        })
    }

    pub fn from_groups(groups: &[QueryGroup], k: usize) -> Result<Self> {
        Self::from_exposures(groups.iter().flat_map(|g| &g.exposures), k)
    }

    /// Builds a dataset from raw columns. `features` rows are user ⊕ item.
    pub fn from_parts(features: Array2<f64>, positions: Vec<usize>, labels: Array1<f64>, k: usize) -> Result<Self> {
        let n = features.nrows();
        if features.ncols() != INPUT_DIM {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: INPUT_DIM,
                got: features.ncols(),
            });
        }
        if positions.len() != n || labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "dataset columns",
                expected: n,
                got: positions.len().min(labels.len()),
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= k) {
            return Err(Error::PositionOutOfRange { position: p, k });
        }
        Ok(Self {
            features,
            positions,
            labels,
            true_pctr: Array1::from_elem(n, f64::NAN),
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of positions.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn labels(&self) -> ArrayView1<'_, f64> {
        self.labels.view()
    }

    /// Generating probabilities; NaN where unknown.
    pub fn true_pctr(&self) -> ArrayView1<'_, f64> {
        self.true_pctr.view()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            labels: self.labels.select(Axis(0), rows),
            true_pctr: self.true_pctr.select(Axis(0), rows),
            k: self.k,
        }
    }
}
