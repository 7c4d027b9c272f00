//! Gauss-Newton outer iterations with conjugate-gradient inner solves, using
//! only Jacobian-vector and vector-Jacobian products.

use crate::error::{dim_err, Error, Result};

/// A nonlinear least-squares problem `min_θ ‖r(θ)‖²`.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Fixes the linearization point for subsequent [`jvp`]/[`vjp`] calls.
    ///
    /// [`jvp`]: LeastSquaresProblem::jvp
    /// [`vjp`]: LeastSquaresProblem::vjp
    fn linearize(&mut self, theta: &[f64]) -> Result<()>;

    /// `J·v` at the linearization point.
    fn jvp(&self, v: &[f64]) -> Vec<f64>;

    /// `Jᵀ·u` at the linearization point.
    fn vjp(&self, u: &[f64]) -> Vec<f64>;
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgTrace {
    pub x: Vec<f64>,
    /// `‖b − A·x_k‖` for k = 0, 1, ...
    pub residual_norms: Vec<f64>,
    /// `½ x_kᵀ A x_k − bᵀ x_k` for k = 0, 1, ...
    pub quadratic: Vec<f64>,
    pub iterations: usize,
}

/// Conjugate gradient on `A·x = b` for symmetric positive (semi)definite `A`,
/// starting from `x = 0`. Stops after `max_iters` steps, when the residual
/// falls below `tol`, or when a search direction has no curvature.
pub fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], max_iters: usize, tol: f64) -> CgTrace {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut residual_norms = vec![rs.sqrt()];
    let mut quadratic = vec![0.0];
    let mut iterations = 0;
    while iterations < max_iters && rs.sqrt() > tol {
        let ap = apply(&p);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rs / curvature;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rs_new = dot(&r, &r);
        iterations += 1;
        residual_norms.push(rs_new.sqrt());
        // A·x = b − r, so ½xᵀAx − bᵀx = −½ xᵀ(b + r)
        quadratic.push(-0.5 * x.iter().zip(b).zip(&r).map(|((xi, bi), ri)| xi * (bi + ri)).sum::<f64>());
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    CgTrace { x, residual_norms, quadratic, iterations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonReport {
    pub theta: Vec<f64>,
    /// Objective `‖r‖²` before the first step and after each outer step.
    pub objectives: Vec<f64>,
    pub inner: Vec<CgTrace>,
}

fn objective(r: &[f64]) -> f64 {
    dot(r, r)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Maximum step halvings before an outer step is rejected.
const MAX_BACKTRACK: usize = 12;

/// Runs `outer_steps` Gauss-Newton steps of `inner_iters` CG iterations each.
///
/// Each step solves `JᵀJ·δ = −Jᵀr`. A step that would raise the objective is
/// halved until it does not; if that fails the parameters are left unchanged,
/// so the objective sequence is non-increasing. Any non-finite value aborts
/// with an error.
pub fn gauss_newton<P: LeastSquaresProblem>(
    problem: &mut P,
    theta0: &[f64],
    outer_steps: usize,
    inner_iters: usize,
) -> Result<GaussNewtonReport> {
    if theta0.len() != problem.n_params() {
        return Err(dim_err!("expected {} parameters, got {}", problem.n_params(), theta0.len()));
    }
    let non_finite = |what: &str| Error::Parameter(format!("non-finite {what} in Gauss-Newton solve"));
    let mut theta = theta0.to_vec();
    let mut r = problem.residuals(&theta)?;
    if !finite(&r) {
        return Err(non_finite("residual"));
    }
    let mut current = objective(&r);
    let mut objectives = vec![current];
    let mut inner = Vec::with_capacity(outer_steps);
    for _ in 0..outer_steps {
        problem.linearize(&theta)?;
        let g = problem.vjp(&r);
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let trace = conjugate_gradient(|v| problem.vjp(&problem.jvp(v)), &rhs, inner_iters, 1e-14);
        if !finite(&trace.x) {
            return Err(non_finite("search direction"));
        }
        let mut step = 1.0;
        for _ in 0..=MAX_BACKTRACK {
            let candidate: Vec<f64> = theta.iter().zip(&trace.x).map(|(t, d)| t + step * d).collect();
            let rc = problem.residuals(&candidate)?;
            if !finite(&rc) {
                return Err(non_finite("residual"));
            }
            let value = objective(&rc);
            if value <= current {
                theta = candidate;
                r = rc;
                current = value;
                break;
            }
            step *= 0.5;
        }
        objectives.push(current);
        inner.push(trace);
    }
    Ok(GaussNewtonReport { theta, objectives, inner })
}

/// Ridge-regularized dense linear least squares `‖A·θ − b‖² + λ‖θ‖²`.
#[derive(Debug, Clone)]
pub struct DenseLinearProblem {
    /// Row-major `m×n`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub reg: f64,
}

impl DenseLinearProblem {
    pub fn new(a: Vec<f64>, b: Vec<f64>, rows: usize, cols: usize, reg: f64) -> Result<Self> {
        if a.len() != rows * cols || b.len() != rows {
            return Err(dim_err!("dense problem expects A {rows}x{cols} and b of length {rows}"));
        }
        Ok(Self { a, b, rows, cols, reg })
    }
}

impl LeastSquaresProblem for DenseLinearProblem {
    fn n_params(&self) -> usize {
        self.cols
    }

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut r: Vec<f64> = (0..self.rows)
            .map(|i| dot(&self.a[i * self.cols..(i + 1) * self.cols], theta) - self.b[i])
            .collect();
        let s = self.reg.sqrt();
        r.extend(theta.iter().map(|t| s * t));
        Ok(r)
    }

    fn linearize(&mut self, _theta: &[f64]) -> Result<()> {
        Ok(())
    }

    fn jvp(&self, v: &[f64]) -> Vec<f64> {
        let s = self.reg.sqrt();
        (0..self.rows)
            .map(|i| dot(&self.a[i * self.cols..(i + 1) * self.cols], v))
            .chain(v.iter().map(|x| s * x))
            .collect()
    }

    fn vjp(&self, u: &[f64]) -> Vec<f64> {
        let s = self.reg.sqrt();
        let mut out: Vec<f64> = u[self.rows..].iter().map(|x| s * x).collect();
        for i in 0..self.rows {
            axpy(&mut out, u[i], &self.a[i * self.cols..(i + 1) * self.cols]);
        }
        out
    }
}
