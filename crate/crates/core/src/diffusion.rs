//! Cross-graph random-walk refinement: each branch's scores diffuse over the
//! other branch's transition graph while staying anchored to their start.

use crate::caf::ScoreMap;
use crate::graph::TransitionMatrix;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("transition matrix has {matrix} nodes but scores have {scores} rows")]
    ShapeMismatch { matrix: usize, scores: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionParams<T> {
    alpha: T,
    steps: usize,
}

impl<T: Scalar> DiffusionParams<T> {
    pub fn new(alpha: T, steps: usize) -> Result<Self, DiffusionError> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(DiffusionError::InvalidAlpha(alpha.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(Self { alpha, steps })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl<T: Scalar> Default for DiffusionParams<T> {
    fn default() -> Self {
        Self {
            alpha: T::of_f64(0.9),
            steps: 40,
        }
    }
}

/// `S(i) = alpha * T * S(i-1) + (1 - alpha) * S(0)` for `steps` iterations.
pub fn diffuse<T: Scalar>(
    t: &TransitionMatrix<T>,
    s0: &ScoreMap<T>,
    p: &DiffusionParams<T>,
) -> Result<ScoreMap<T>, DiffusionError> {
    if t.len() != s0.values.nrows() {
        return Err(DiffusionError::ShapeMismatch {
            matrix: t.len(),
            scores: s0.values.nrows(),
        });
    }
    let anchor = &s0.values * (T::one() - p.alpha);
    let mut current = s0.values.clone();
    for _ in 0..p.steps {
        let mut next = t.apply(current.view());
        next.zip_mut_with(&anchor, |n, &a| *n = p.alpha * *n + a);
        current = next;
    }
    Ok(ScoreMap {
        values: current,
        grid: s0.grid,
    })
}

/// CLIP scores walk the DINO graph, DINO scores walk the CLIP graph.
pub fn refine_bidirectional<T: Scalar>(
    t_clip: &TransitionMatrix<T>,
    t_dino: &TransitionMatrix<T>,
    s_clip: &ScoreMap<T>,
    s_dino: &ScoreMap<T>,
    p: &DiffusionParams<T>,
) -> Result<(ScoreMap<T>, ScoreMap<T>), DiffusionError> {
    let (g_clip, g_dino) = rayon::join(|| diffuse(t_dino, s_clip, p), || diffuse(t_clip, s_dino, p));
    Ok((g_clip?, g_dino?))
}
