//! Grassmann-manifold primitives and a Riemannian conjugate-gradient minimizer.
//!
//! Points are represented by orthonormal `D × d` matrices. Steps use a QR
//! retraction and the previous search direction is carried over by
//! re-projecting it onto the current tangent space.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Orthonormality tolerance for [`StiefelPoint`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Most backtracking halvings a line search may take.
pub const MAX_BACKTRACKS: usize = 40;

/// An orthonormal `D × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    w: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        let (big_d, d) = w.shape();
        if d == 0 || d > big_d {
            return Err(Error::Shape(format!("{big_d}×{d} is not a valid Stiefel shape")));
        }
        let err = orthonormality_error(&w);
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!("‖WᵀW − I‖ = {err:e}")));
        }
        Ok(Self { w })
    }

    /// Orthonormal factor of an arbitrary full-rank matrix.
    pub fn orthonormalize(m: &DMatrix<f64>) -> Result<Self> {
        Ok(Self { w: qr_factor(m)? })
    }

    /// The first `d` columns of the identity.
    pub fn identity(big_d: usize, d: usize) -> Result<Self> {
        Self::new(DMatrix::identity(big_d, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    pub fn ambient_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }
}

fn orthonormality_error(w: &DMatrix<f64>) -> f64 {
    let d = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(d, d)).amax()
}

/// Q factor with a non-negative R diagonal.
fn qr_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (big_d, d) = m.shape();
    if d == 0 || d > big_d {
        return Err(Error::Shape(format!("{big_d}×{d} is not a valid Stiefel shape")));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for k in 0..d {
        let rk = r[(k, k)];
        if !(rk.abs() > 1e-12 * scale) {
            return Err(Error::RankDeficient);
        }
        if rk < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    if !q.iter().all(|v| v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub rel_cost_tol: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-5,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            rel_cost_tol: 1e-6,
        }
    }
}

impl CgOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iters == 0 {
            return Err(Error::config("cg.max_iters", "must be ≥ 1"));
        }
        for (name, v) in [
            ("cg.grad_tol", self.grad_tol),
            ("cg.armijo_c1", self.armijo_c1),
            ("cg.initial_step", self.initial_step),
            ("cg.rel_cost_tol", self.rel_cost_tol),
        ] {
            if !positive(v) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.armijo_c1 < 1.0) {
            return Err(Error::config("cg.armijo_c1", "must be < 1"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::config("cg.backtrack_factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// `(I − W Wᵀ) G`.
pub fn tangent_project(w: &StiefelPoint, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = w.matrix();
    if g.shape() != w.shape() {
        return Err(Error::Shape(format!("gradient is {:?}, point is {:?}", g.shape(), w.shape())));
    }
    Ok(g - w * (w.transpose() * g))
}

/// Orthonormal factor of `W + tH`. `t = 0` returns `W` unchanged.
pub fn retract(w: &StiefelPoint, h: &DMatrix<f64>, t: f64) -> Result<StiefelPoint> {
    if h.shape() != w.matrix().shape() {
        return Err(Error::Shape(format!("direction is {:?}, point is {:?}", h.shape(), w.matrix().shape())));
    }
    if t == 0.0 {
        return Ok(w.clone());
    }
    Ok(StiefelPoint { w: qr_factor(&(w.matrix() + h * t))? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    CostTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    /// Step accepted to reach this iterate (0 for the start).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgTrace {
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
    pub line_search_failed: bool,
}

impl CgTrace {
    pub fn costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.cost).collect()
    }

    /// Number of accepted steps.
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].cost <= w[0].cost)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,cost,grad_norm,step\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.cost, r.grad_norm, r.step));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_csv())
    }
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Riemannian conjugate gradient with Polak–Ribière+ updates and Armijo
/// backtracking along the retraction.
///
/// The returned trace has one row per accepted iterate, starting with `W0`,
/// and its costs never increase. A line search that exhausts
/// [`MAX_BACKTRACKS`] halvings (after one steepest-descent retry) ends the
/// run with the best iterate so far and `line_search_failed` set.
pub fn cg_minimize<C, G>(
    mut cost: C,
    mut egrad: G,
    w0: StiefelPoint,
    opts: &CgOptions,
) -> Result<(StiefelPoint, CgTrace)>
where
    C: FnMut(&StiefelPoint) -> Result<f64>,
    G: FnMut(&StiefelPoint) -> Result<DMatrix<f64>>,
{
    opts.validate()?;
    let mut w = w0;
    let mut f = cost(&w)?;
    if !f.is_finite() {
        return Err(Error::InvalidArgument(format!("initial cost is {f}")));
    }
    let mut grad = tangent_project(&w, &egrad(&w)?)?;
    let mut gnorm = grad.norm();
    let mut rows = vec![TraceRow { iteration: 0, cost: f, grad_norm: gnorm, step: 0.0 }];
    let mut dir = -&grad;
    let mut step_guess = opts.initial_step;
    let mut failed = false;

    let stop = 'outer: loop {
        if gnorm <= opts.grad_tol {
            break StopReason::GradientTolerance;
        }
        if rows.len() > opts.max_iters {
            break StopReason::MaxIterations;
        }

        let mut slope = inner(&grad, &dir);
        if !(slope < 0.0) {
            dir = -&grad;
            slope = -gnorm * gnorm;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let mut t = step_guess;
            for _ in 0..=MAX_BACKTRACKS {
                if let Ok(candidate) = retract(&w, &dir, t) {
                    let fc = cost(&candidate)?;
                    if fc.is_finite() && fc <= f + opts.armijo_c1 * t * slope {
                        accepted = Some((candidate, fc, t));
                        break;
                    }
                }
                t *= opts.backtrack_factor;
            }
            if accepted.is_some() || attempt == 1 {
                break;
            }
            // retry once along steepest descent
            dir = -&grad;
            slope = -gnorm * gnorm;
            step_guess = opts.initial_step;
        }
        let Some((w_new, f_new, t)) = accepted else {
            failed = true;
            break 'outer StopReason::LineSearchFailed;
        };

        let grad_new = tangent_project(&w_new, &egrad(&w_new)?)?;
        let gnorm_new = grad_new.norm();
        let prev_dir = tangent_project(&w_new, &dir)?;
        let prev_grad = tangent_project(&w_new, &grad)?;
        let beta = (inner(&grad_new, &(&grad_new - &prev_grad)) / (gnorm * gnorm)).max(0.0);
        dir = -&grad_new + prev_dir * beta;

        let rel_change = (f - f_new).abs() / f.abs().max(f64::MIN_POSITIVE);
        // grow the next trial step when the first trial was accepted
        step_guess = if t >= step_guess { 2.0 * t } else { t };
        w = w_new;
        f = f_new;
        grad = grad_new;
        gnorm = gnorm_new;
        rows.push(TraceRow { iteration: rows.len(), cost: f, grad_norm: gnorm, step: t });

        if rel_change < opts.rel_cost_tol {
            break StopReason::CostTolerance;
        }
    };

    Ok((w, CgTrace { rows, stop, line_search_failed: failed }))
}

/// Frobenius norm of the part of `span(b)` lying outside `span(a)`: the
/// root sum of squared sines of the principal angles.
pub fn subspace_distance(a: &StiefelPoint, b: &StiefelPoint) -> f64 {
    let a = a.matrix();
    (b.matrix() - a * (a.transpose() * b.matrix())).norm()
}
