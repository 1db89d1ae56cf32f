//! Fixed-step RK4 integration of the filtering and control Riccati
//! equations, the Lyapunov flow of the unconditioned state, the scalar
//! offset `α_t` of the quadratic value function, and the total minimal
//! cost.
//!
//! Filtering runs forward from `Σ_0`:
//!
//! ```text
//! dΣ/dt = AΣ + ΣAᵀ + N − (ΣCᵀ + M)(ΣCᵀ + M)ᵀ
//! ```
//!
//! Control runs backward from `Ω_T`:
//!
//! ```text
//! −dΩ/dt = ΩA + AᵀΩ + F − (BᵀΩ + G)ᵀ(BᵀΩ + G)
//! ```
//!
//! Every stored matrix is exactly symmetric.

use std::io::Write;

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{all_finite, asymmetry, check_shape, frobenius_inner, max_abs, symmetrize, Mat, Vector};
use crate::model::{check_uncertainty, LinearCoefficients};

/// Entries beyond this magnitude are treated as finite escape.
pub const BLOWUP_LIMIT: f64 = 1e12;
/// Heisenberg-bound tolerance along conditional covariance paths.
pub const PATH_UNCERTAINTY_TOLERANCE: f64 = 1e-8;

/// Quadratic running cost `XᵀFX + XᵀGᵀu + uᵀGX + uᵀu` with terminal cost
/// `XᵀΩ_T X`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub f: Mat,
    pub g: Mat,
    pub omega_t: Mat,
}

impl CostSpec {
    pub fn new(f: Mat, g: Mat, omega_t: Mat) -> Result<Self> {
        let m = f.nrows();
        check_shape("F", &f, m, m)?;
        check_shape("Omega_T", &omega_t, m, m)?;
        if g.ncols() != m {
            return Err(Error::dims("G", format!("{m} columns"), g.ncols()));
        }
        for (name, x) in [("F", &f), ("Omega_T", &omega_t)] {
            if !all_finite(x) || asymmetry(x) > 1e-12 {
                return Err(Error::InvalidParameter(format!("{name} must be finite and symmetric")));
            }
            if m > 0 && SymmetricEigen::new(x.clone()).eigenvalues.min() < -1e-12 {
                return Err(Error::InvalidParameter(format!("{name} must be positive semidefinite")));
            }
        }
        if !all_finite(&g) {
            return Err(Error::InvalidParameter("G must be finite".into()));
        }
        Ok(Self { f: symmetrize(&f), g, omega_t: symmetrize(&omega_t) })
    }

    pub(crate) fn check_against(&self, coeffs: &LinearCoefficients) -> Result<()> {
        let m = coeffs.state_dim();
        check_shape("F", &self.f, m, m)?;
        check_shape("G", &self.g, coeffs.control_dim(), m)
    }
}

/// One symmetric matrix per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    pub grid: TimeGrid,
    pub values: Vec<Mat>,
}

impl MatrixPath {
    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        self.values.last().expect("paths are never empty")
    }

    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    /// Path with time reversed, `t ↦ t0 + t1 − t`.
    pub fn reversed(&self) -> MatrixPath {
        MatrixPath { grid: self.grid, values: self.values.iter().rev().cloned().collect() }
    }

    /// CSV with columns `t, {prefix}_00, {prefix}_01, …` (row-major).
    pub fn write_csv<W: Write>(&self, out: W, prefix: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (r, c) = self.values[0].shape();
        let mut header = vec!["t".to_string()];
        for i in 0..r {
            for j in 0..c {
                header.push(format!("{prefix}_{i}{j}"));
            }
        }
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut row = vec![self.grid.time(k).to_string()];
            for i in 0..r {
                for j in 0..c {
                    row.push(v[(i, j)].to_string());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl ScalarPath {
    pub fn at(&self, k: usize) -> f64 {
        self.values[k]
    }
}

fn rk4_step(f: &impl Fn(&Mat) -> Mat, x: &Mat, h: f64) -> Mat {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn filter_rhs(coeffs: &LinearCoefficients, sigma: &Mat) -> Mat {
    let gain = sigma * coeffs.c.transpose() + &coeffs.m;
    &coeffs.a * sigma + sigma * coeffs.a.transpose() + &coeffs.n - &gain * gain.transpose()
}

fn control_rhs(coeffs: &LinearCoefficients, cost: &CostSpec, omega: &Mat) -> Mat {
    let gain = coeffs.b.transpose() * omega + &cost.g;
    omega * &coeffs.a + coeffs.a.transpose() * omega + &cost.f - gain.transpose() * gain
}

fn lyapunov_rhs(coeffs: &LinearCoefficients, sigma: &Mat) -> Mat {
    &coeffs.a * sigma + sigma * coeffs.a.transpose() + &coeffs.n
}

fn guard(x: &Mat, context: &'static str, t: f64) -> Result<()> {
    if !all_finite(x) || max_abs(x) > BLOWUP_LIMIT {
        return Err(Error::NonFinite { context, t });
    }
    Ok(())
}

fn check_initial(coeffs: &LinearCoefficients, x0: &Mat, name: &str) -> Result<Mat> {
    let m = coeffs.state_dim();
    if x0.shape() != (m, m) {
        return Err(Error::dims("initial matrix", format!("{m}x{m}"), format!("{:?}", x0.shape())));
    }
    if !all_finite(x0) || asymmetry(x0) > 1e-9 {
        return Err(Error::InvalidParameter(format!("{name} must be finite and symmetric")));
    }
    Ok(symmetrize(x0))
}

fn forward_path(
    grid: &TimeGrid,
    x0: Mat,
    rhs: impl Fn(&Mat) -> Mat,
    mut monitor: impl FnMut(f64, &Mat) -> Result<()>,
) -> Result<MatrixPath> {
    grid.validate()?;
    let dt = grid.dt();
    monitor(grid.t0, &x0)?;
    let mut values = Vec::with_capacity(grid.len());
    values.push(x0);
    for k in 0..grid.n_steps {
        let next = symmetrize(&rk4_step(&rhs, &values[k], dt));
        monitor(grid.time(k + 1), &next)?;
        values.push(next);
    }
    Ok(MatrixPath { grid: *grid, values })
}

/// Posterior error covariance `Σ_t` on `grid`, starting from `sigma0`.
///
/// When the coefficients carry symplectic data the Heisenberg bound is
/// checked at `Σ_0` and at every grid point.
pub fn integrate_filter_riccati(coeffs: &LinearCoefficients, sigma0: &Mat, grid: &TimeGrid) -> Result<MatrixPath> {
    let sigma0 = check_initial(coeffs, sigma0, "Sigma0")?;
    let symplectic = coeffs.symplectic.clone();
    forward_path(grid, sigma0, |s| filter_rhs(coeffs, s), |t, s| {
        guard(s, "filter Riccati", t)?;
        if let Some(sym) = &symplectic {
            let report = check_uncertainty(s, &sym.j, sym.hbar);
            if report.min_eigenvalue < -PATH_UNCERTAINTY_TOLERANCE {
                return Err(Error::UncertaintyViolation { t, min_eig: report.min_eigenvalue });
            }
        }
        Ok(())
    })
}

/// Unconditioned covariance: the filter flow without the gain term.
pub fn lyapunov_unconditional(coeffs: &LinearCoefficients, sigma0: &Mat, grid: &TimeGrid) -> Result<MatrixPath> {
    let sigma0 = check_initial(coeffs, sigma0, "Sigma0")?;
    forward_path(grid, sigma0, |s| lyapunov_rhs(coeffs, s), |t, s| guard(s, "Lyapunov flow", t))
}

/// Value-function matrix `Ω_t`, integrated backward from `cost.omega_t` and
/// stored in forward time order.
pub fn integrate_control_riccati(coeffs: &LinearCoefficients, cost: &CostSpec, grid: &TimeGrid) -> Result<MatrixPath> {
    grid.validate()?;
    cost.check_against(coeffs)?;
    let dt = grid.dt();
    let rhs = |o: &Mat| control_rhs(coeffs, cost, o);
    let mut values = vec![cost.omega_t.clone()];
    for k in (0..grid.n_steps).rev() {
        let prev = values.last().expect("seeded with the terminal value");
        let next = symmetrize(&rk4_step(&rhs, prev, dt));
        guard(&next, "control Riccati", grid.time(k))?;
        values.push(next);
    }
    values.reverse();
    Ok(MatrixPath { grid: *grid, values })
}

/// `L̃ᵀL̃` with `L̃ = BᵀΩ + G`.
pub(crate) fn gain_gram(coeffs: &LinearCoefficients, cost: &CostSpec, omega: &Mat) -> Mat {
    let gain = coeffs.b.transpose() * omega + &cost.g;
    gain.transpose() * gain
}

fn alpha_integrand(coeffs: &LinearCoefficients, cost: &CostSpec, omega: &Mat, sigma: &Mat) -> (f64, f64) {
    (frobenius_inner(omega, &coeffs.n), frobenius_inner(&gain_gram(coeffs, cost, omega), sigma))
}

/// `out[k] = ∫_{t_k}^{T} f dt` from grid samples. Each interval uses the
/// cubic through four neighbouring samples (one-sided at the ends), so the
/// result is fourth-order like the RK4 paths it is fed with.
fn quadrature_backward(grid: &TimeGrid, f: &[f64]) -> Vec<f64> {
    let dt = grid.dt();
    let n = f.len() - 1;
    let mut out = vec![0.0; f.len()];
    for k in (0..n).rev() {
        let step = if n < 3 {
            0.5 * (f[k] + f[k + 1])
        } else if k == 0 {
            (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) / 24.0
        } else if k == n - 1 {
            (f[n - 3] - 5.0 * f[n - 2] + 19.0 * f[n - 1] + 9.0 * f[n]) / 24.0
        } else {
            (-f[k - 1] + 13.0 * f[k] + 13.0 * f[k + 1] - f[k + 2]) / 24.0
        };
        out[k] = out[k + 1] + dt * step;
    }
    out
}

/// `α_t` with `−dα/dt = ((BᵀΩ+G)ᵀ(BᵀΩ+G), Σ_t) + (Ω_t, N)`, `α_T = 0`,
/// by fourth-order backward quadrature.
pub fn integrate_alpha(
    omega_path: &MatrixPath,
    sigma_path: &MatrixPath,
    coeffs: &LinearCoefficients,
    cost: &CostSpec,
) -> Result<ScalarPath> {
    omega_path.grid.ensure_same(&sigma_path.grid, "alpha integration")?;
    let f: Vec<f64> = omega_path
        .values
        .iter()
        .zip(&sigma_path.values)
        .map(|(o, s)| {
            let (noise, gain) = alpha_integrand(coeffs, cost, o, s);
            noise + gain
        })
        .collect();
    Ok(ScalarPath { grid: omega_path.grid, values: quadrature_backward(&omega_path.grid, &f) })
}

/// Terms of the total minimal cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// `X̄ᵀΩ₀X̄`.
    pub mean_term: f64,
    /// `Tr[Ω₀Σ]`.
    pub covariance_term: f64,
    /// `∫ Tr[Ω_t N] dt`.
    pub noise_integral: f64,
    /// `∫ Tr[(BᵀΩ_t+G)ᵀ(BᵀΩ_t+G) Σ_t] dt`.
    pub gain_integral: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.mean_term + self.covariance_term + self.noise_integral + self.gain_integral
    }
}

pub fn cost_breakdown(
    xbar: &Vector,
    sigma0: &Mat,
    omega_path: &MatrixPath,
    sigma_path: &MatrixPath,
    coeffs: &LinearCoefficients,
    cost: &CostSpec,
) -> Result<CostBreakdown> {
    omega_path.grid.ensure_same(&sigma_path.grid, "total cost")?;
    let m = coeffs.state_dim();
    if xbar.len() != m {
        return Err(Error::dims("Xbar", m, xbar.len()));
    }
    check_shape("Sigma0", sigma0, m, m)?;
    if max_abs(&(sigma0 - sigma_path.first())) > 1e-12 {
        return Err(Error::InvalidParameter("Sigma path does not start at Sigma0".into()));
    }
    let (noise, gain): (Vec<f64>, Vec<f64>) = omega_path
        .values
        .iter()
        .zip(&sigma_path.values)
        .map(|(o, s)| alpha_integrand(coeffs, cost, o, s))
        .unzip();
    let omega0 = omega_path.first();
    Ok(CostBreakdown {
        mean_term: (xbar.transpose() * omega0 * xbar)[(0, 0)],
        covariance_term: frobenius_inner(omega0, sigma0),
        noise_integral: quadrature_backward(&omega_path.grid, &noise)[0],
        gain_integral: quadrature_backward(&omega_path.grid, &gain)[0],
    })
}

/// `X̄ᵀΩ₀X̄ + Tr[Ω₀Σ] + ∫Tr[Ω_t N] + ∫Tr[(BᵀΩ_t+G)ᵀ(BᵀΩ_t+G)Σ_t]`.
pub fn total_minimal_cost(
    xbar: &Vector,
    sigma0: &Mat,
    omega_path: &MatrixPath,
    sigma_path: &MatrixPath,
    coeffs: &LinearCoefficients,
    cost: &CostSpec,
) -> Result<f64> {
    let total = cost_breakdown(xbar, sigma0, omega_path, sigma_path, coeffs, cost)?.total();
    debug_assert!({
        let alpha0 = integrate_alpha(omega_path, sigma_path, coeffs, cost)?.values[0];
        let omega0 = omega_path.first();
        let value = (xbar.transpose() * omega0 * xbar)[(0, 0)] + frobenius_inner(omega0, sigma0) + alpha0;
        (value - total).abs() <= 1e-9 * (1.0 + total.abs())
    });
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct StationaryOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Stop once ‖dΣ/dt‖_∞ falls below this.
    pub derivative_tol: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { dt: 1e-2, t_max: 1e3, derivative_tol: 1e-10 }
    }
}

/// Long-time limit of the filtering Riccati flow.
pub fn stationary_filter_covariance(coeffs: &LinearCoefficients) -> Result<Mat> {
    stationary_filter_covariance_with(coeffs, StationaryOptions::default())
}

pub fn stationary_filter_covariance_with(coeffs: &LinearCoefficients, opts: StationaryOptions) -> Result<Mat> {
    let m = coeffs.state_dim();
    // A multiple of the identity large enough to satisfy Σ ≥ (iħ/2)J.
    let scale = coeffs
        .symplectic
        .as_ref()
        .map_or(1.0, |s| (0.5 * s.hbar * s.j.norm()).max(1.0));
    let mut sigma = Mat::identity(m, m) * scale;
    let mut t = 0.0;
    let rhs = |s: &Mat| filter_rhs(coeffs, s);
    let mut residual = max_abs(&rhs(&sigma));
    while t < opts.t_max {
        if residual < opts.derivative_tol {
            let scale = 1.0 + max_abs(&sigma);
            if residual / scale >= 1e-8 {
                break;
            }
            return Ok(sigma);
        }
        sigma = symmetrize(&rk4_step(&rhs, &sigma, opts.dt));
        t += opts.dt;
        guard(&sigma, "stationary filter", t)?;
        residual = max_abs(&rhs(&sigma));
    }
    Err(Error::NoConvergence { t_max: opts.t_max, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_coefficients, free_particle_model};

    fn fp(mass: f64, hbar: f64) -> LinearCoefficients {
        build_coefficients(&free_particle_model(mass, hbar).unwrap()).unwrap()
    }

    fn sym2(q: f64, qp: f64, p: f64) -> Mat {
        Mat::from_row_slice(2, 2, &[q, qp, qp, p])
    }

    fn zero_system(m: usize) -> LinearCoefficients {
        LinearCoefficients::new(Mat::zeros(m, m), Mat::zeros(m, 1), Mat::zeros(1, m), Mat::zeros(m, m), Mat::zeros(m, 1))
            .unwrap()
    }

    #[test]
    fn stationary_point_is_preserved() {
        let grid = TimeGrid::with_step(10.0, 1e-3).unwrap();
        let path = integrate_filter_riccati(&fp(1.0, 1.0), &sym2(0.5, 0.5, 1.0), &grid).unwrap();
        for s in &path.values {
            assert!(max_abs(&(s - sym2(0.5, 0.5, 1.0))) < 1e-8);
        }
    }

    #[test]
    fn zero_vector_field_is_constant() {
        let grid = TimeGrid::with_step(3.0, 1e-2).unwrap();
        let s0 = sym2(1.0, 0.2, 3.0);
        let path = integrate_filter_riccati(&zero_system(2), &s0, &grid).unwrap();
        assert!(path.values.iter().all(|s| *s == s0));
        let lyap = lyapunov_unconditional(&zero_system(2), &s0, &grid).unwrap();
        assert!(lyap.values.iter().all(|s| *s == s0));
    }

    #[test]
    fn filter_converges_from_broad_prior() {
        let grid = TimeGrid::with_step(20.0, 1e-3).unwrap();
        let path = integrate_filter_riccati(&fp(1.0, 1.0), &sym2(2.0, 0.0, 2.0), &grid).unwrap();
        assert!(max_abs(&(path.last() - sym2(0.5, 0.5, 1.0))) < 1e-6);
        assert!(path.values.iter().all(|s| asymmetry(s) == 0.0));
    }

    #[test]
    fn filter_flags_unphysical_prior() {
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let err = integrate_filter_riccati(&fp(1.0, 1.0), &(Mat::identity(2, 2) * 0.1), &grid).unwrap_err();
        assert!(matches!(err, Error::UncertaintyViolation { .. }));
    }

    #[test]
    fn control_with_trivial_data_keeps_terminal_value() {
        let grid = TimeGrid::with_step(2.0, 1e-2).unwrap();
        let omega = sym2(2.0, -0.3, 1.0);
        let cost = CostSpec::new(Mat::zeros(2, 2), Mat::zeros(1, 2), omega.clone()).unwrap();
        let path = integrate_control_riccati(&zero_system(2), &cost, &grid).unwrap();
        assert!(path.values.iter().all(|o| *o == omega));
    }

    #[test]
    fn control_riccati_backward_stationary_physical_coupling() {
        // With B = (0, 1)ᵀ and F = diag(1, 0) the algebraic equations give
        // ω_QP² = 1, ω_P² = 2ω_QP, ω_Q = ω_QP ω_P.
        let grid = TimeGrid::with_step(20.0, 1e-3).unwrap();
        let cost = CostSpec::new(sym2(1.0, 0.0, 0.0), Mat::zeros(1, 2), Mat::identity(2, 2)).unwrap();
        let path = integrate_control_riccati(&fp(1.0, 1.0), &cost, &grid).unwrap();
        let r2 = 2f64.sqrt();
        assert!(max_abs(&(path.first() - sym2(r2, 1.0, r2))) < 1e-6);
    }

    #[test]
    fn control_blowup_is_detected() {
        // dΩ/ds = 2aΩ grows like e^{100} over the horizon.
        let one = |x: f64| Mat::from_element(1, 1, x);
        let coeffs = LinearCoefficients::new(one(50.0), one(0.0), one(0.0), one(0.0), one(0.0)).unwrap();
        let cost = CostSpec::new(one(0.0), one(0.0), one(1e-6)).unwrap();
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let err = integrate_control_riccati(&coeffs, &cost, &grid).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn alpha_vanishes_without_noise_or_gain() {
        let grid = TimeGrid::with_step(2.0, 1e-2).unwrap();
        let mut c = fp(1.0, 1.0);
        c.n = Mat::zeros(2, 2);
        c.b = Mat::zeros(2, 1);
        // Without noise the filter covariance is unphysical; only α matters here.
        c.symplectic = None;
        let cost = CostSpec::new(sym2(1.0, 0.0, 0.0), Mat::zeros(1, 2), Mat::identity(2, 2)).unwrap();
        let omega = integrate_control_riccati(&c, &cost, &grid).unwrap();
        let sigma = integrate_filter_riccati(&c, &sym2(1.0, 0.0, 1.0), &grid).unwrap();
        let alpha = integrate_alpha(&omega, &sigma, &c, &cost).unwrap();
        assert!(alpha.values.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn alpha_constant_integrand_is_linear() {
        let grid = TimeGrid::new(0.0, 4.0, 400).unwrap();
        let c = fp(1.0, 1.0);
        let cost = CostSpec::new(sym2(1.0, 0.0, 0.0), Mat::from_row_slice(1, 2, &[0.3, -0.1]), Mat::identity(2, 2))
            .unwrap();
        let omega_bar = sym2(1.5, 0.2, 0.7);
        let sigma_bar = sym2(0.5, 0.5, 1.0);
        let omega = MatrixPath { grid, values: vec![omega_bar.clone(); grid.len()] };
        let sigma = MatrixPath { grid, values: vec![sigma_bar.clone(); grid.len()] };
        let alpha = integrate_alpha(&omega, &sigma, &c, &cost).unwrap();
        let gain = c.b.transpose() * &omega_bar + &cost.g;
        let rate = frobenius_inner(&(gain.transpose() * gain), &sigma_bar) + frobenius_inner(&omega_bar, &c.n);
        for (k, a) in alpha.values.iter().enumerate() {
            let expected = (grid.t1 - grid.time(k)) * rate;
            assert!((a - expected).abs() < 1e-12 * (1.0 + expected));
        }
    }

    #[test]
    fn alpha_requires_matching_grids() {
        let g1 = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let g2 = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let c = fp(1.0, 1.0);
        let cost = CostSpec::new(Mat::zeros(2, 2), Mat::zeros(1, 2), Mat::zeros(2, 2)).unwrap();
        let a = MatrixPath { grid: g1, values: vec![Mat::zeros(2, 2); 11] };
        let b = MatrixPath { grid: g2, values: vec![Mat::zeros(2, 2); 21] };
        assert!(matches!(integrate_alpha(&a, &b, &c, &cost), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn stationary_covariance_closed_forms() {
        for (hbar, mass) in [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)] {
            let s = stationary_filter_covariance(&fp(mass, hbar)).unwrap();
            let expect = sym2(0.5 * (hbar / mass).sqrt(), 0.5 * hbar, hbar * (hbar * mass).sqrt());
            assert!(max_abs(&(&s - expect)) < 1e-6, "{s}");
            let product = (s[(0, 0)] * s[(1, 1)]).sqrt();
            assert!((product - hbar / 2f64.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn stationary_solver_reports_divergence() {
        // Unobserved unstable drift never settles.
        let c = LinearCoefficients::new(
            Mat::identity(2, 2) * 0.01,
            Mat::zeros(2, 1),
            Mat::zeros(1, 2),
            Mat::zeros(2, 2),
            Mat::zeros(2, 1),
        )
        .unwrap();
        let opts = StationaryOptions { t_max: 10.0, ..Default::default() };
        assert!(matches!(stationary_filter_covariance_with(&c, opts), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn lyapunov_cubic_spreading() {
        let s = 0.7;
        let grid = TimeGrid::with_step(5.0, 1e-2).unwrap();
        let path = lyapunov_unconditional(&fp(1.0, 1.0), &sym2(s, 0.0, s), &grid).unwrap();
        for (k, sig) in path.values.iter().enumerate() {
            let t = grid.time(k);
            let expected = s + s * t * t + t.powi(3) / 3.0;
            assert!((sig[(0, 0)] - expected).abs() < 1e-9 * (1.0 + expected));
        }
    }

    #[test]
    fn trivial_total_cost() {
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let c = zero_system(2);
        let omega_t = sym2(2.0, 0.5, 1.0);
        let cost = CostSpec::new(Mat::zeros(2, 2), Mat::zeros(1, 2), omega_t.clone()).unwrap();
        let sigma0 = sym2(0.4, 0.1, 0.3);
        let xbar = Vector::from_vec(vec![1.0, -2.0]);
        let omega = integrate_control_riccati(&c, &cost, &grid).unwrap();
        let sigma = integrate_filter_riccati(&c, &sigma0, &grid).unwrap();
        let total = total_minimal_cost(&xbar, &sigma0, &omega, &sigma, &c, &cost).unwrap();
        let expected = (xbar.transpose() * &omega_t * &xbar)[(0, 0)] + frobenius_inner(&omega_t, &sigma0);
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_rows() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let path = MatrixPath { grid, values: vec![sym2(1.0, 2.0, 3.0); 3] };
        let mut buf = Vec::new();
        path.write_csv(&mut buf, "S").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,S_00,S_01,S_10,S_11"));
        assert_eq!(lines.next(), Some("0,1,2,2,3"));
        assert_eq!(text.lines().count(), 4);
    }
}
