//! Superpixel-regularized fusion of the two refined score maps.
//!
//! Both branch predictions become per-pixel distributions, their weighted KL
//! data terms are collapsed into a single geometric-mean target, and
//!
//! ```text
//! E(Q) = sum_p lambda * KL(Q_p || g_p) + beta * sum_{(p,q) 4-adjacent} w_pq * ||Q_p - Q_q||_1
//! ```
//!
//! is minimized over per-pixel simplices with a primal-dual hybrid gradient
//! scheme. The TV operator `D` is the unweighted forward difference; the edge
//! weights enter through the dual box `|Y_e| <= beta * w_e`.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, Axis, Ix3, Zip};
use rayon::prelude::*;

use crate::caf::ScoreMap;
use crate::geometry::{resample_bilinear, Grid};
use crate::scalar::{lit, Scalar};
use crate::superpixel::EdgeWeightField;
use crate::tensorio::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum CscpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a probability field: {0}")]
    InvalidField(String),
    #[error("non-finite value at iteration {iteration} in {location}")]
    NonFiniteEncountered { iteration: usize, location: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `H x W x K` per-pixel class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField<T> {
    values: Array3<T>,
}

impl<T: Scalar> ProbabilityField<T> {
    /// Checks non-negativity and unit sums (within `1e-5`).
    pub fn new(values: Array3<T>) -> Result<Self, CscpError> {
        let tol = lit::<T>(1e-5);
        for (idx, px) in values.lanes(Axis(2)).into_iter().enumerate() {
            let sum: T = px.iter().copied().sum();
            if px.iter().any(|&v| !(v >= T::zero())) || !((sum - T::one()).abs() <= tol) {
                return Err(CscpError::InvalidField(format!(
                    "pixel {idx} has entries {px:?} summing to {sum}"
                )));
            }
        }
        if values.is_empty() {
            return Err(CscpError::InvalidField("empty field".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<T> {
        &self.values
    }

    pub fn into_values(self) -> Array3<T> {
        self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().2
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_array(&self.values).expect("non-empty field")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CscpError> {
        let arr = t
            .to_array::<T>()?
            .into_dimensionality::<Ix3>()
            .map_err(|_| CscpError::ShapeMismatch(format!("expected H x W x K, got {:?}", t.shape())))?;
        Self::new(arr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CscpParams<T> {
    pub lambda_c: T,
    pub lambda_d: T,
    pub beta: T,
    pub max_iters: usize,
    pub rel_tol: T,
    pub softmax_temp: T,
    pub eps_floor: T,
}

impl<T: Scalar> Default for CscpParams<T> {
    fn default() -> Self {
        Self {
            lambda_c: lit(1.0),
            lambda_d: lit(0.2),
            beta: lit(0.10),
            max_iters: 500,
            rel_tol: lit(1e-6),
            softmax_temp: lit(1.0),
            eps_floor: lit(1e-8),
        }
    }
}

impl<T: Scalar> CscpParams<T> {
    pub fn validate(&self) -> Result<(), CscpError> {
        let bad = |m: String| Err(CscpError::InvalidParameter(m));
        if !(self.lambda_c >= T::zero() && self.lambda_d >= T::zero()) {
            return bad(format!(
                "lambda_c = {} and lambda_d = {} must be >= 0",
                self.lambda_c, self.lambda_d
            ));
        }
        if !(self.lambda_c + self.lambda_d > T::zero()) {
            return bad("lambda_c + lambda_d must be > 0".into());
        }
        if !(self.beta >= T::zero() && self.beta.is_finite()) {
            return bad(format!("beta = {} must be >= 0", self.beta));
        }
        if !(self.rel_tol >= T::zero()) {
            return bad(format!("rel_tol = {} must be >= 0", self.rel_tol));
        }
        if !(self.softmax_temp > T::zero()) {
            return bad(format!("softmax_temp = {} must be > 0", self.softmax_temp));
        }
        if !(self.eps_floor > T::zero() && self.eps_floor <= lit(1e-3)) {
            return bad(format!("eps_floor = {} must lie in (0, 1e-3]", self.eps_floor));
        }
        Ok(())
    }
}

/// Clamps to `eps_floor` and renormalizes one distribution in place.
fn floor_and_normalize<T: Scalar>(px: &mut [T], eps_floor: T) {
    px.iter_mut().for_each(|v| *v = v.max(eps_floor));
    let total: T = px.iter().copied().sum();
    px.iter_mut().for_each(|v| *v /= total);
}

/// Upsamples patch scores to pixels, applies a tempered softmax per pixel and
/// floors every probability at `eps_floor`.
pub fn scores_to_probs<T: Scalar>(
    s: &ScoreMap<T>,
    image_size: (usize, usize),
    temp: T,
    eps_floor: T,
) -> Result<ProbabilityField<T>, CscpError> {
    if !(temp > T::zero()) {
        return Err(CscpError::InvalidParameter(format!(
            "softmax temperature {temp} must be > 0"
        )));
    }
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(CscpError::ShapeMismatch("image size must be non-zero".into()));
    }
    let k = s.num_classes();
    let mut dense = resample_bilinear(s.values.view(), s.grid, Grid::new(h, w));
    for mut px in dense.rows_mut() {
        let top = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        px.mapv_inplace(|v| ((v - top) / temp).exp());
        let total: T = px.iter().copied().sum();
        px.mapv_inplace(|v| v / total);
        floor_and_normalize(px.as_slice_mut().expect("row-major"), eps_floor);
    }
    let values = dense.into_shape_with_order((h, w, k)).expect("contiguous");
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CscpError::NonFiniteEncountered {
            iteration: 0,
            location: "softmax of scores".into(),
        });
    }
    Ok(ProbabilityField { values })
}

/// Collapses `lambda_c KL(q||a) + lambda_d KL(q||b)` into
/// `(lambda_c + lambda_d) KL(q||g) + const` with `g` the normalized weighted
/// geometric mean of `a` and `b`.
pub fn collapse_kl_targets<T: Scalar>(
    a: &ProbabilityField<T>,
    b: &ProbabilityField<T>,
    lambda_c: T,
    lambda_d: T,
) -> Result<(ProbabilityField<T>, T), CscpError> {
    if a.values.dim() != b.values.dim() {
        return Err(CscpError::ShapeMismatch(format!(
            "fields {:?} and {:?} differ",
            a.values.dim(),
            b.values.dim()
        )));
    }
    let total = lambda_c + lambda_d;
    if !(lambda_c >= T::zero() && lambda_d >= T::zero() && total > T::zero()) {
        return Err(CscpError::InvalidParameter(format!(
            "weights {lambda_c}, {lambda_d} must be >= 0 with a positive sum"
        )));
    }
    let weighted_log = |lambda: T, p: T| {
        if lambda == T::zero() {
            T::zero()
        } else {
            lambda * p.ln()
        }
    };
    let mut g = Array3::<T>::zeros(a.values.dim());
    Zip::from(g.lanes_mut(Axis(2)))
        .and(a.values.lanes(Axis(2)))
        .and(b.values.lanes(Axis(2)))
        .for_each(|mut out, pa, pb| {
            for ((o, &x), &y) in out.iter_mut().zip(pa).zip(pb) {
                *o = (weighted_log(lambda_c, x) + weighted_log(lambda_d, y)) / total;
            }
            let top = out.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            out.mapv_inplace(|v| (v - top).exp());
            let z: T = out.iter().copied().sum();
            out.mapv_inplace(|v| v / z);
        });
    Ok((ProbabilityField { values: g }, total))
}

/// `sum_k q_k ln(q_k / g_k)` with `0 ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(q: &[T], g: &[T]) -> T {
    q.iter()
        .zip(g)
        .filter(|(&qk, _)| qk > T::zero())
        .map(|(&qk, &gk)| qk * (qk / gk).ln())
        .sum()
}

/// Value of the fused objective at `q`.
pub fn energy<T: Scalar>(
    q: &Array3<T>,
    g: &ProbabilityField<T>,
    lambda_total: T,
    w: &EdgeWeightField<T>,
    beta: T,
) -> T {
    let (h, wd, _) = q.dim();
    let data: T = q
        .iter()
        .zip(g.values.iter())
        .filter(|(&qk, _)| qk > T::zero())
        .map(|(&qk, &gk)| qk * (qk / gk).ln())
        .sum();
    let mut tv = T::zero();
    for y in 0..h {
        for x in 0..wd {
            let here = q.slice(s![y, x, ..]);
            if x + 1 < wd {
                let d: T = here
                    .iter()
                    .zip(q.slice(s![y, x + 1, ..]))
                    .map(|(&a, &b)| (a - b).abs())
                    .sum();
                tv += w.horizontal[[y, x]] * d;
            }
            if y + 1 < h {
                let d: T = here
                    .iter()
                    .zip(q.slice(s![y + 1, x, ..]))
                    .map(|(&a, &b)| (a - b).abs())
                    .sum();
                tv += w.vertical[[y, x]] * d;
            }
        }
    }
    lambda_total * data + beta * tv
}

/// Root of `t ln q + q = c` for `t > 0`, via Newton on `u = ln q` started
/// from an upper bound so the iterates decrease monotonically.
fn solve_log_linear<T: Scalar>(c: T, t: T) -> T {
    let one = T::one();
    let mut u = if c >= one {
        c.ln().min(c / t)
    } else if c > T::zero() {
        (c - t * c.ln()).ln().min(c / t)
    } else {
        c / t
    };
    let tol = T::epsilon() * lit(4.0);
    for _ in 0..100 {
        let e = u.exp();
        let step = (t * u + e - c) / (t + e);
        u -= step;
        if step.abs() <= tol * u.abs().max(one) {
            break;
        }
    }
    u.exp()
}

/// Proximal map of `t * KL(. || g)` restricted to the simplex:
/// `argmin_q t sum q_k ln(q_k / g_k) + 0.5 ||q - v||^2`, written into `out`.
///
/// The simplex multiplier is located by a bracketed Newton iteration with a
/// bisection fallback; each coordinate then solves a strictly monotone scalar
/// equation.
pub fn prox_kl_simplex<T: Scalar>(v: &[T], g: &[T], t: T, eps_floor: T, out: &mut [T]) {
    let k = v.len();
    let one = T::one();
    let base: Vec<T> = v.iter().zip(g).map(|(&vk, &gk)| vk - t * (one - gk.ln())).collect();
    let h = |q: T| t * q.ln() + q;
    let fill = |nu: T, out: &mut [T]| -> (T, T) {
        let mut sum = T::zero();
        let mut slope = T::zero();
        for (o, &b) in out.iter_mut().zip(&base) {
            *o = solve_log_linear(b - nu, t);
            sum += *o;
            slope += *o / (t + *o);
        }
        (sum - one, -slope)
    };

    let at_uniform = h(one / T::of_usize(k));
    let at_one = h(one);
    let mut hi = base.iter().map(|&b| b - at_uniform).fold(T::neg_infinity(), T::max);
    let mut lo = base.iter().map(|&b| b - at_one).fold(T::infinity(), T::min);
    let tol = T::solver_tolerance(1e-10);
    let residual_tol = T::epsilon() * lit(16.0);

    let mut nu = hi;
    for _ in 0..200 {
        let (phi, dphi) = fill(nu, out);
        if phi.abs() <= residual_tol {
            break;
        }
        if phi > T::zero() {
            lo = nu;
        } else {
            hi = nu;
        }
        if hi - lo <= tol * hi.abs().max(lo.abs()).max(one) {
            fill((lo + hi) * lit(0.5), out);
            break;
        }
        let newton = nu - phi / dphi;
        nu = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else {
            (lo + hi) * lit(0.5)
        };
    }
    floor_and_normalize(out, eps_floor);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy: f64,
    pub primal_change: f64,
}

#[derive(Debug, Clone)]
pub struct PdhgSolution<T> {
    pub q: ProbabilityField<T>,
    pub energy: T,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

impl<T> PdhgSolution<T> {
    /// Convergence history as `iteration,energy,primal_change` CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("iteration,energy,primal_change\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{:.12e},{:.12e}", r.iteration, r.energy, r.primal_change);
        }
        out
    }
}

const CONSECUTIVE_SMALL_STEPS: usize = 3;

/// Minimizes the fused objective over per-pixel simplices, starting from
/// `Q = g` with zero duals.
pub fn solve_pdhg<T: Scalar>(
    g: &ProbabilityField<T>,
    lambda_total: T,
    w: &EdgeWeightField<T>,
    params: &CscpParams<T>,
) -> Result<PdhgSolution<T>, CscpError> {
    params.validate()?;
    if !(lambda_total > T::zero()) {
        return Err(CscpError::InvalidParameter(format!(
            "lambda_total = {lambda_total} must be > 0"
        )));
    }
    let (h, wd, k) = g.values.dim();
    if w.horizontal.dim() != (h, wd - 1) || w.vertical.dim() != (h - 1, wd) {
        return Err(CscpError::ShapeMismatch(format!(
            "edge weights {:?}/{:?} do not fit a {h}x{wd} image",
            w.horizontal.dim(),
            w.vertical.dim()
        )));
    }
    let beta = params.beta;
    let step = T::one() / lit::<T>(8.0).sqrt();
    let (sigma, tau) = (step, step);
    let prox_t = tau * lambda_total;
    let eps_floor = params.eps_floor;
    let pixels = T::of_usize(h * wd);

    let box_h = w.horizontal.mapv(|x| x * beta);
    let box_v = w.vertical.mapv(|x| x * beta);
    let mut y_h = Array3::<T>::zeros((h, wd - 1, k));
    let mut y_v = Array3::<T>::zeros((h - 1, wd, k));
    let mut q = g.values.clone();
    let mut q_bar = q.clone();
    let mut v = Array3::<T>::zeros((h, wd, k));
    let mut q_next = Array3::<T>::zeros((h, wd, k));

    let initial_energy = energy(&q, g, lambda_total, w, beta);
    let mut best = (initial_energy, q.clone());
    let mut log = Vec::new();
    let mut small_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=params.max_iters {
        iterations = it;

        // dual ascent on forward differences, then projection onto the weighted box
        Zip::indexed(&mut y_h).for_each(|(y, x, c), yv| {
            let d = q_bar[[y, x + 1, c]] - q_bar[[y, x, c]];
            let bound = box_h[[y, x]];
            *yv = (*yv + sigma * d).max(-bound).min(bound);
        });
        Zip::indexed(&mut y_v).for_each(|(y, x, c), yv| {
            let d = q_bar[[y + 1, x, c]] - q_bar[[y, x, c]];
            let bound = box_v[[y, x]];
            *yv = (*yv + sigma * d).max(-bound).min(bound);
        });
        if y_h.iter().chain(y_v.iter()).any(|x| !x.is_finite()) {
            return Err(CscpError::NonFiniteEncountered {
                iteration: it,
                location: "dual update".into(),
            });
        }

        // v = q - tau * D^T y
        v.assign(&q);
        Zip::indexed(&y_h).for_each(|(y, x, c), &yv| {
            v[[y, x, c]] += tau * yv;
            v[[y, x + 1, c]] -= tau * yv;
        });
        Zip::indexed(&y_v).for_each(|(y, x, c), &yv| {
            v[[y, x, c]] += tau * yv;
            v[[y + 1, x, c]] -= tau * yv;
        });

        q_next
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(k)
            .zip(v.as_slice().expect("standard layout").par_chunks(k))
            .zip(g.values.as_slice().expect("standard layout").par_chunks(k))
            .for_each(|((out, vp), gp)| prox_kl_simplex(vp, gp, prox_t, eps_floor, out));
        if q_next.iter().any(|x| !x.is_finite()) {
            return Err(CscpError::NonFiniteEncountered {
                iteration: it,
                location: "primal proximal step".into(),
            });
        }

        let mut change = T::zero();
        Zip::from(&mut q_bar).and(&q_next).and(&q).for_each(|bar, &new, &old| {
            change += (new - old).abs();
            *bar = new + new - old;
        });
        std::mem::swap(&mut q, &mut q_next);
        let change = change / pixels;

        let e = energy(&q, g, lambda_total, w, beta);
        if !e.is_finite() {
            return Err(CscpError::NonFiniteEncountered {
                iteration: it,
                location: "energy".into(),
            });
        }
        if e < best.0 {
            best = (e, q.clone());
        }
        log.push(IterationRecord {
            iteration: it,
            energy: e.to_f64().unwrap_or(f64::NAN),
            primal_change: change.to_f64().unwrap_or(f64::NAN),
        });

        if change < params.rel_tol {
            small_steps += 1;
            if small_steps >= CONSECUTIVE_SMALL_STEPS {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    let final_energy = energy(&q, g, lambda_total, w, beta);
    let slack = params.rel_tol * best.0.abs().max(T::min_positive_value());
    let (energy, q) = if final_energy <= best.0 + slack {
        (final_energy, q)
    } else {
        best
    };
    Ok(PdhgSolution {
        q: ProbabilityField { values: q },
        energy,
        iterations,
        converged,
        log,
    })
}

/// Per-pixel argmax, ties resolved to the lowest class index.
pub fn argmax_labels<T: Scalar>(q: &ProbabilityField<T>) -> Array2<i64> {
    let (h, w, _) = q.values.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let px = q.values.slice(s![y, x, ..]);
        let mut best = 0;
        for (c, &v) in px.iter().enumerate() {
            if v > px[best] {
                best = c;
            }
        }
        best as i64
    })
}
