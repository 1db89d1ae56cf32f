//! Quantum Kalman–Bucy filter for the posterior mean.
//!
//! The covariance of the Gaussian posterior does not depend on the
//! measurement record, so it is integrated once by
//! [`crate::riccati::integrate_filter_riccati`] and injected here; only the
//! mean is advanced with the observed increments.
//!
//! Output convention: `dY = C X dt + dW` with unit-intensity noise on every
//! channel, so the innovation `dỸ = dY − C X̂ dt` has variance `dt`.

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Mat, Vector};
use crate::model::{GaussianBelief, LinearCoefficients};

/// Integrated output `dY` over one step of length `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementIncrement {
    pub dy: Vector,
    pub dt: f64,
}

impl MeasurementIncrement {
    pub fn new(dy: Vector, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("measurement step must be positive, got {dt}")));
        }
        if dy.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("measurement increment is not finite".into()));
        }
        Ok(Self { dy, dt })
    }
}

/// `K̃ = ΣCᵀ + M`.
pub fn filter_gain(sigma: &Mat, coeffs: &LinearCoefficients) -> Result<Mat> {
    let m = coeffs.state_dim();
    if sigma.shape() != (m, m) {
        return Err(Error::dims("filter gain", format!("{m}x{m}"), format!("{:?}", sigma.shape())));
    }
    Ok(sigma * coeffs.c.transpose() + &coeffs.m)
}

/// `dỸ = dY − C X̂ dt`.
pub fn innovation(inc: &MeasurementIncrement, xhat: &Vector, coeffs: &LinearCoefficients) -> Vector {
    &inc.dy - &coeffs.c * xhat * inc.dt
}

/// One Euler–Maruyama step of the mean,
/// `X̂ ← X̂ + (AX̂ + Bu)dt + K̃(Σ) dỸ`, with the covariance replaced by the
/// pre-integrated `sigma_next`.
pub fn filter_step(
    belief: &GaussianBelief,
    u: &Vector,
    inc: &MeasurementIncrement,
    coeffs: &LinearCoefficients,
    sigma_next: &Mat,
) -> Result<GaussianBelief> {
    let m = coeffs.state_dim();
    if belief.mean.len() != m {
        return Err(Error::dims("belief mean", m, belief.mean.len()));
    }
    if u.len() != coeffs.control_dim() {
        return Err(Error::dims("control", coeffs.control_dim(), u.len()));
    }
    if inc.dy.len() != coeffs.output_dim() {
        return Err(Error::dims("measurement increment", coeffs.output_dim(), inc.dy.len()));
    }
    let gain = filter_gain(&belief.cov, coeffs)?;
    let d_tilde = innovation(inc, &belief.mean, coeffs);
    let mean = &belief.mean + (&coeffs.a * &belief.mean + &coeffs.b * u) * inc.dt + gain * d_tilde;
    if !mean.iter().all(|x| x.is_finite()) || !all_finite(sigma_next) {
        return Err(Error::NonFinite { context: "filter step", t: f64::NAN });
    }
    GaussianBelief::new(mean, sigma_next.clone())
}
