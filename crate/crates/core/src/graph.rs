//! Sparse kNN random-walk transition matrices over patch features.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::caf::normalize_rows_l2;
use crate::geometry::Grid;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("feature stack has no layers")]
    EmptyStack,
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("{rows} feature rows do not match grid {grid}")]
    GridMismatch { rows: usize, grid: Grid },
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
}

/// Row-compressed, row-stochastic `P x P` matrix over the patches of `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
    grid: Grid,
}

impl<T: Scalar> TransitionMatrix<T> {
    /// Keeps the non-zero entries of a dense row-stochastic matrix.
    pub fn from_dense(dense: ArrayView2<'_, T>, grid: Grid) -> Result<Self, GraphError> {
        let n = dense.nrows();
        if dense.ncols() != n || n != grid.len() {
            return Err(GraphError::GridMismatch { rows: n, grid });
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for (i, row) in dense.outer_iter().enumerate() {
            let sum: T = row.iter().copied().sum();
            let sum = sum.to_f64().unwrap_or(f64::NAN);
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < T::zero()) {
                return Err(GraphError::NotStochastic { row: i, sum });
            }
            for (j, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            row_ptr,
            col_idx,
            values,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Column indices (ascending) and weights of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Array2<T> {
        let n = self.len();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `self . x` for a dense `P x K` right-hand side.
    pub fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        assert_eq!(x.nrows(), self.len(), "right-hand side rows must match matrix size");
        let mut out = Array2::zeros(x.dim());
        for (i, mut dst) in out.outer_iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                dst.zip_mut_with(&x.row(j), |d, &v| *d += w * v);
            }
        }
        out
    }
}

/// Layer mean followed by row-wise l2 normalization.
pub fn mean_features<T: Scalar>(stack: ArrayView3<'_, T>) -> Result<Array2<T>, GraphError> {
    let mean = stack.mean_axis(Axis(0)).ok_or(GraphError::EmptyStack)?;
    Ok(normalize_rows_l2(mean))
}

/// Normalizes retained weights in place; `false` when they cannot form a distribution.
fn normalize_weights<T: Scalar>(weights: &mut [T]) -> bool {
    let total: T = weights.iter().copied().sum();
    if !(total.is_finite() && total > T::zero()) {
        return false;
    }
    weights.iter_mut().for_each(|w| *w /= total);
    true
}

fn knn_row<T: Scalar>(f: ArrayView2<'_, T>, i: usize, k: usize, tau: T) -> Vec<(usize, T)> {
    let p = f.nrows();
    let query = f.row(i);
    let mut sims: Vec<(usize, T)> = (0..p).filter(|&j| j != i).map(|j| (j, query.dot(&f.row(j)))).collect();
    // descending similarity, ties to the lower column index
    let order = |a: &(usize, T), b: &(usize, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or_else(|| b.1.is_nan().cmp(&a.1.is_nan()).reverse())
            .then(a.0.cmp(&b.0))
    };
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, order);
        sims.truncate(k);
    }
    let top = sims
        .iter()
        .map(|&(_, s)| s)
        .fold(T::neg_infinity(), |m, s| if s > m { s } else { m });
    let mut weights: Vec<T> = sims.iter().map(|&(_, s)| ((s - top) / tau).exp()).collect();
    if !normalize_weights(&mut weights) {
        let uniform = T::one() / T::of_usize(p);
        return (0..p).map(|j| (j, uniform)).collect();
    }
    let mut row: Vec<(usize, T)> = sims.iter().map(|&(j, _)| j).zip(weights).collect();
    row.sort_by_key(|&(j, _)| j);
    row
}

/// Keeps the `k` most similar other patches per row, weights them by
/// `exp(cos / tau)` and normalizes each row to sum to one.
///
/// `f` must hold unit-norm rows. A `k` of `P` or more is clamped to `P - 1`.
pub fn build_transition<T: Scalar>(
    f: ArrayView2<'_, T>,
    k: usize,
    tau: T,
    grid: Grid,
) -> Result<TransitionMatrix<T>, GraphError> {
    let p = f.nrows();
    if p != grid.len() {
        return Err(GraphError::GridMismatch { rows: p, grid });
    }
    if p < 2 {
        return Err(GraphError::TooFewNodes(p));
    }
    if k == 0 {
        return Err(GraphError::InvalidK);
    }
    if !(tau > T::zero() && tau.is_finite()) {
        return Err(GraphError::InvalidTau(tau.to_f64().unwrap_or(f64::NAN)));
    }
    let k = if k >= p {
        log::warn!("k = {k} exceeds the {} available neighbours; clamping", p - 1);
        p - 1
    } else {
        k
    };
    let rows: Vec<Vec<(usize, T)>> = (0..p).into_par_iter().map(|i| knn_row(f, i, k, tau)).collect();
    let mut row_ptr = Vec::with_capacity(p + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::with_capacity(p * k);
    let mut values = Vec::with_capacity(p * k);
    for row in rows {
        for (j, w) in row {
            col_idx.push(j);
            values.push(w);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(TransitionMatrix {
        row_ptr,
        col_idx,
        values,
        grid,
    })
}
