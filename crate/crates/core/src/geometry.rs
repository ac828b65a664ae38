//! Patch grids and bilinear resampling between them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Row-major patch (or pixel) grid. Index of `(r, c)` is `r * cols + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for Grid {
    fn from([rows, cols]: [usize; 2]) -> Self {
        Self { rows, cols }
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.rows, g.cols]
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Source taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel-centre sampling positions, clamped to the source extent.
fn axis_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: T::of_f64(x - lo as f64),
            }
        })
        .collect()
}

/// Bilinearly resamples a channels-last field laid out as `from.len() x C`
/// onto `to`, returning `to.len() x C`. Identity when the grids match.
pub fn resample_bilinear<T: Scalar>(src: ArrayView2<'_, T>, from: Grid, to: Grid) -> Array2<T> {
    assert_eq!(src.nrows(), from.len(), "source rows must match the source grid");
    if from == to {
        return src.to_owned();
    }
    let channels = src.ncols();
    let row_taps = axis_taps::<T>(from.rows, to.rows);
    let col_taps = axis_taps::<T>(from.cols, to.cols);
    let one = T::one();
    let mut out = Array2::zeros((to.len(), channels));
    for (r, rt) in row_taps.iter().enumerate() {
        for (c, ct) in col_taps.iter().enumerate() {
            let corners = [
                (rt.lo, ct.lo, (one - rt.frac) * (one - ct.frac)),
                (rt.lo, ct.hi, (one - rt.frac) * ct.frac),
                (rt.hi, ct.lo, rt.frac * (one - ct.frac)),
                (rt.hi, ct.hi, rt.frac * ct.frac),
            ];
            let mut dst = out.row_mut(r * to.cols + c);
            for (sr, sc, w) in corners {
                if w == T::zero() {
                    continue;
                }
                let s = src.row(sr * from.cols + sc);
                dst.zip_mut_with(&s, |d, &v| *d += w * v);
            }
        }
    }
    out
}
