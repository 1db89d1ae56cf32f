//! Optimal feedback law, filtering/control duality and the HJB residual of
//! the quadratic value function
//! `S(t, X̂, Σ) = X̂ᵀΩ_t X̂ + ⟨Ω_t, Σ⟩ + α_t`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{check_shape, frobenius_inner, Mat, Vector};
use crate::model::LinearCoefficients;
use crate::riccati::{CostSpec, MatrixPath, ScalarPath};

/// Feedback gains `L̃_t = BᵀΩ_t + G`, one per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGainPath {
    pub grid: TimeGrid,
    pub gains: Vec<Mat>,
}

impl ControlGainPath {
    pub fn at(&self, k: usize) -> &Mat {
        &self.gains[k]
    }

    /// Every gain shifted by the same matrix; used for optimality probes.
    pub fn offset_by(&self, delta: &Mat) -> Result<ControlGainPath> {
        let shape = self.gains[0].shape();
        if delta.shape() != shape {
            return Err(Error::dims("gain offset", format!("{shape:?}"), format!("{:?}", delta.shape())));
        }
        Ok(ControlGainPath { grid: self.grid, gains: self.gains.iter().map(|g| g + delta).collect() })
    }

    /// CSV with columns `t, L_00, L_01, …` (row-major).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let path = MatrixPath { grid: self.grid, values: self.gains.clone() };
        path.write_csv(out, "L")
    }
}

pub fn control_gain_path(omega_path: &MatrixPath, coeffs: &LinearCoefficients, cost: &CostSpec) -> Result<ControlGainPath> {
    if omega_path.values.len() != omega_path.grid.len() {
        return Err(Error::GridMismatch(format!(
            "Omega path has {} values for {} grid points",
            omega_path.values.len(),
            omega_path.grid.len()
        )));
    }
    cost.check_against(coeffs)?;
    let bt = coeffs.b.transpose();
    let gains = omega_path.values.iter().map(|o| &bt * o + &cost.g).collect();
    Ok(ControlGainPath { grid: omega_path.grid, gains })
}

/// `u = −L̃ X̂`.
pub fn optimal_control(gain: &Mat, xhat: &Vector) -> Vector {
    -(gain * xhat)
}

/// Pointwise minimiser of `u ↦ ⟨ρ, C(u)⟩ + uᵀBᵀ∇S`, i.e.
/// `−(½Bᵀ∇_X̂ S + G X̂)`.
pub fn bellman_minimizer(grad_x: &Vector, xhat: &Vector, coeffs: &LinearCoefficients, cost: &CostSpec) -> Vector {
    -(coeffs.b.transpose() * grad_x * 0.5 + &cost.g * xhat)
}

/// Value-function data at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub omega: Mat,
    pub alpha: f64,
}

impl QuadraticValue {
    pub fn eval(&self, xhat: &Vector, sigma: &Mat) -> f64 {
        (xhat.transpose() * &self.omega * xhat)[(0, 0)] + frobenius_inner(&self.omega, sigma) + self.alpha
    }
}

/// `Ω_t` and `α_t` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePath {
    pub omega: MatrixPath,
    pub alpha: ScalarPath,
}

impl ValuePath {
    pub fn new(omega: MatrixPath, alpha: ScalarPath) -> Result<Self> {
        omega.grid.ensure_same(&alpha.grid, "value path")?;
        Ok(Self { omega, alpha })
    }

    pub fn at(&self, k: usize) -> QuadraticValue {
        QuadraticValue { omega: self.omega.values[k].clone(), alpha: self.alpha.values[k] }
    }

    fn eval(&self, k: usize, xhat: &Vector, sigma: &Mat) -> f64 {
        (xhat.transpose() * &self.omega.values[k] * xhat)[(0, 0)]
            + frobenius_inner(&self.omega.values[k], sigma)
            + self.alpha.values[k]
    }

    /// ∂S/∂t at grid index `k` for fixed `(X̂, Σ)`, fourth-order accurate.
    fn time_derivative(&self, k: usize, xhat: &Vector, sigma: &Mat) -> f64 {
        let n = self.omega.grid.n_steps;
        let dt = self.omega.grid.dt();
        let s = |i: usize| self.eval(i, xhat, sigma);
        if n < 4 {
            return if k == n { (s(n) - s(n - 1)) / dt } else { (s(k + 1) - s(k)) / dt };
        }
        let w: [(isize, f64); 5] = match k {
            0 => [(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)],
            1 => [(-1, -3.0), (0, -10.0), (1, 18.0), (2, -6.0), (3, 1.0)],
            _ if k == n - 1 => [(1, 3.0), (0, 10.0), (-1, -18.0), (-2, 6.0), (-3, -1.0)],
            _ if k == n => [(0, 25.0), (-1, -48.0), (-2, 36.0), (-3, -16.0), (-4, 3.0)],
            _ => [(-2, 1.0), (-1, -8.0), (0, 0.0), (1, 8.0), (2, -1.0)],
        };
        w.iter().map(|&(o, c)| c * s((k as isize + o) as usize)).sum::<f64>() / (12.0 * dt)
    }
}

/// Absolute residual of the HJB equation for the quadratic value function
/// at grid index `k` and point `(X̂, Σ)`.
///
/// The ansatz is exact where `Σ` lies on the covariance path that produced
/// `value.alpha`; elsewhere the residual measures `⟨L̃ᵀL̃, Σ − Σ_t⟩`.
pub fn hjb_residual(
    value: &ValuePath,
    k: usize,
    xhat: &Vector,
    sigma: &Mat,
    coeffs: &LinearCoefficients,
    cost: &CostSpec,
) -> Result<f64> {
    let grid = value.omega.grid;
    if k >= grid.len() || value.omega.values.len() != grid.len() || value.alpha.values.len() != grid.len() {
        return Err(Error::GridMismatch(format!("index {k} outside grid of {} points", grid.len())));
    }
    let m = coeffs.state_dim();
    if xhat.len() != m {
        return Err(Error::dims("X̂", m, xhat.len()));
    }
    check_shape("Σ", sigma, m, m)?;
    cost.check_against(coeffs)?;

    let omega = &value.omega.values[k];
    let grad_x = omega * xhat * 2.0;
    let grad_sigma = omega;
    let hess_x = omega * 2.0;
    let a = &coeffs.a;

    let drift = 0.5 * ((xhat.transpose() * a.transpose() * &grad_x)[(0, 0)] + (grad_x.transpose() * a * xhat)[(0, 0)]);
    let state_cost = (xhat.transpose() * &cost.f * xhat)[(0, 0)];
    let cov_drift = frobenius_inner(&(a * sigma + sigma * a.transpose() + &coeffs.n), grad_sigma);
    let cov_cost = frobenius_inner(sigma, &cost.f);
    let u_star = coeffs.b.transpose() * &grad_x * 0.5 + &cost.g * xhat;
    let control = u_star.dot(&u_star);
    let gain = sigma * coeffs.c.transpose() + &coeffs.m;
    let diffusion = frobenius_inner(&(&gain * gain.transpose()), &(hess_x * 0.5 - grad_sigma));

    let rhs = drift + state_cost + cov_drift + cov_cost - control + diffusion;
    let lhs = -value.time_derivative(k, xhat, sigma);
    Ok((lhs - rhs).abs())
}

/// Coordinate relabelling `X'_i = X_{perm[i]}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidParameter(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self(perm))
    }

    /// Reverses the coordinate order; for one (Q, P) pair this is Q ↔ P.
    pub fn reversal(m: usize) -> Self {
        Self((0..m).rev().collect())
    }

    pub fn matrix(&self) -> Mat {
        let m = self.0.len();
        Mat::from_fn(m, m, |i, j| if self.0[i] == j { 1.0 } else { 0.0 })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }
}

/// Data of the filtering Riccati problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterProblem {
    pub a: Mat,
    pub c: Mat,
    pub n: Mat,
    pub m: Mat,
    pub sigma0: Mat,
    pub grid: TimeGrid,
}

/// Data of the control Riccati problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub a: Mat,
    pub b: Mat,
    pub f: Mat,
    pub g: Mat,
    pub omega_t: Mat,
    pub grid: TimeGrid,
}

impl FilterProblem {
    pub fn from_coefficients(coeffs: &LinearCoefficients, sigma0: Mat, grid: TimeGrid) -> Self {
        Self { a: coeffs.a.clone(), c: coeffs.c.clone(), n: coeffs.n.clone(), m: coeffs.m.clone(), sigma0, grid }
    }

    /// Coefficients with no control input.
    pub fn coefficients(&self) -> Result<LinearCoefficients> {
        let dim = self.a.nrows();
        LinearCoefficients::new(self.a.clone(), Mat::zeros(dim, 0), self.c.clone(), self.n.clone(), self.m.clone())
    }
}

impl ControlProblem {
    /// Coefficients with no output and no process noise.
    pub fn coefficients(&self) -> Result<LinearCoefficients> {
        let dim = self.a.nrows();
        LinearCoefficients::new(self.a.clone(), self.b.clone(), Mat::zeros(0, dim), Mat::zeros(dim, dim), Mat::zeros(dim, 0))
    }

    pub fn cost(&self) -> Result<CostSpec> {
        CostSpec::new(self.f.clone(), self.g.clone(), self.omega_t.clone())
    }
}

fn check_filter_shapes(p: &FilterProblem) -> Result<()> {
    let m = p.a.nrows();
    check_shape("A", &p.a, m, m)?;
    check_shape("C", &p.c, p.c.nrows(), m)?;
    check_shape("N", &p.n, m, m)?;
    check_shape("M", &p.m, m, p.c.nrows())?;
    check_shape("Sigma0", &p.sigma0, m, m)
}

fn check_control_shapes(p: &ControlProblem) -> Result<()> {
    let m = p.a.nrows();
    check_shape("A", &p.a, m, m)?;
    check_shape("B", &p.b, m, p.b.ncols())?;
    check_shape("F", &p.f, m, m)?;
    check_shape("G", &p.g, p.b.ncols(), m)?;
    check_shape("Omega_T", &p.omega_t, m, m)
}

/// Filtering → control: `A ↦ Aᵀ`, `B := Cᵀ`, `F := N`, `G := Mᵀ`,
/// `Ω_T := Σ_0`, optionally followed by a coordinate relabelling. Solving
/// the image backward and reading it at `T − t` gives `Σ_t` (relabelled).
pub fn duality_map(p: &FilterProblem, perm: Option<&Permutation>) -> Result<ControlProblem> {
    check_filter_shapes(p)?;
    let out = ControlProblem {
        a: p.a.transpose(),
        b: p.c.transpose(),
        f: p.n.clone(),
        g: p.m.transpose(),
        omega_t: p.sigma0.clone(),
        grid: p.grid,
    };
    match perm {
        None => Ok(out),
        Some(perm) => relabel_control(out, perm),
    }
}

/// Inverse of [`duality_map`] for the same permutation.
pub fn duality_inverse(p: &ControlProblem, perm: Option<&Permutation>) -> Result<FilterProblem> {
    check_control_shapes(p)?;
    let p = match perm {
        None => p.clone(),
        Some(perm) => relabel_control(p.clone(), &perm.inverse())?,
    };
    Ok(FilterProblem {
        a: p.a.transpose(),
        c: p.b.transpose(),
        n: p.f.clone(),
        m: p.g.transpose(),
        sigma0: p.omega_t.clone(),
        grid: p.grid,
    })
}

fn relabel_control(p: ControlProblem, perm: &Permutation) -> Result<ControlProblem> {
    let m = p.a.nrows();
    if perm.0.len() != m {
        return Err(Error::dims("permutation", m, perm.0.len()));
    }
    let pm = perm.matrix();
    let pt = pm.transpose();
    Ok(ControlProblem {
        a: &pm * &p.a * &pt,
        b: &pm * &p.b,
        f: &pm * &p.f * &pt,
        g: &p.g * &pt,
        omega_t: &pm * &p.omega_t * &pt,
        grid: p.grid,
    })
}
