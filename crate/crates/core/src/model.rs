//! Linear quantum systems on phase space.
//!
//! A [`PhaseSpaceModel`] carries the symplectic form `J`, the quadratic
//! Hamiltonian data `R`, `K`, the measurement couplings `Λ` (so that the
//! channel operators are `L = ΛX`) and Planck's constant. From these,
//! [`build_coefficients`] derives the drift, input, output and noise
//! matrices of the linear Langevin and output equations
//!
//! ```text
//! dX = (A X + B u) dt + dV,      dY = C X dt + dW
//! ```
//!
//! All arithmetic is done in complex form and the results are checked to be
//! real before they are handed on.

use nalgebra::SymmetricEigen;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, c64, check_shape, mat_from_rows, mat_to_rows, max_abs, real_part_checked,
    symmetrize, to_complex, CMat, Mat, Vector,
};

/// Imaginary residue tolerated (and truncated) in derived coefficients.
pub const IMAG_TOLERANCE: f64 = 1e-12;
/// Eigenvalue tolerance of the Heisenberg check.
pub const UNCERTAINTY_TOLERANCE: f64 = 1e-9;

const SYMMETRY_TOLERANCE: f64 = 1e-9;
const DET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceModel {
    /// Symplectic form, `[X_i, X_j] = iħ J_ij`.
    pub j: Mat,
    /// Quadratic part of the Hamiltonian. Complex only when ingested with an
    /// imaginary part, which [`build_coefficients`] then rejects.
    pub r: CMat,
    /// d×m channel couplings.
    pub lambda: CMat,
    /// m×d control coupling.
    pub k: CMat,
    pub hbar: f64,
}

impl PhaseSpaceModel {
    pub fn new(j: Mat, r: Mat, lambda: CMat, k: CMat, hbar: f64) -> Result<Self> {
        Self::with_complex_r(j, to_complex(&r), lambda, k, hbar)
    }

    pub fn with_complex_r(j: Mat, r: CMat, lambda: CMat, k: CMat, hbar: f64) -> Result<Self> {
        let m = j.nrows();
        if m == 0 || m % 2 != 0 {
            return Err(Error::InvalidModel(format!("phase-space dimension {m} must be even and positive")));
        }
        check_shape("J", &j, m, m)?;
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::dims("R", format!("{m}x{m}"), format!("{}x{}", r.nrows(), r.ncols())));
        }
        let d = lambda.nrows();
        if d == 0 || lambda.ncols() != m {
            return Err(Error::dims("Lambda", format!("d x {m} with d > 0"), format!("{}x{}", d, lambda.ncols())));
        }
        if k.nrows() != m || k.ncols() != d {
            return Err(Error::dims("K", format!("{m}x{d}"), format!("{}x{}", k.nrows(), k.ncols())));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
        }
        if max_abs(&(&j + j.transpose())) > IMAG_TOLERANCE {
            return Err(Error::InvalidModel("J is not antisymmetric".into()));
        }
        if j.determinant().abs() <= DET_TOLERANCE {
            return Err(Error::InvalidModel("J is degenerate".into()));
        }
        let r_asym = (&r - r.transpose()).iter().fold(0.0_f64, |a, z| a.max(z.norm()));
        if r_asym > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidModel(format!("R is not symmetric (deviation {r_asym:e})")));
        }
        let r = (&r + r.transpose()) * c64(0.5, 0.0);
        if [&r, &lambda, &k].iter().any(|x| x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
            return Err(Error::InvalidModel("non-finite entry".into()));
        }
        Ok(Self { j, r, lambda, k, hbar })
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    pub fn channels(&self) -> usize {
        self.lambda.nrows()
    }

    /// Reads the JSON model document with keys
    /// `m, d, hbar, J, R, Lambda_re, Lambda_im, K_re, K_im` (plus an optional
    /// `R_im`). Errors name the offending key.
    pub fn from_json_value(doc: &Value) -> Result<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::InvalidModel("model document must be a JSON object".into()))?;
        const KEYS: [&str; 10] = ["m", "d", "hbar", "J", "R", "R_im", "Lambda_re", "Lambda_im", "K_re", "K_im"];
        if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidModel(format!("unknown key `{k}`")));
        }
        let m = get_usize(obj, "m")?;
        let d = get_usize(obj, "d")?;
        let hbar = match obj.get("hbar") {
            None => 1.0,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::InvalidModel("key `hbar`: expected a number".into()))?,
        };
        let j = get_matrix(obj, "J", (m, m))?;
        let r_re = get_matrix(obj, "R", (m, m))?;
        let r_im = get_matrix_or_zero(obj, "R_im", (m, m))?;
        let lam_re = get_matrix(obj, "Lambda_re", (d, m))?;
        let lam_im = get_matrix_or_zero(obj, "Lambda_im", (d, m))?;
        let k_re = get_matrix(obj, "K_re", (m, d))?;
        let k_im = get_matrix_or_zero(obj, "K_im", (m, d))?;
        let join = |re: &Mat, im: &Mat| re.zip_map(im, c64);
        Self::with_complex_r(j, join(&r_re, &r_im), join(&lam_re, &lam_im), join(&k_re, &k_im), hbar)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json_value(&serde_json::from_str(s)?)
    }

    pub fn to_json_value(&self) -> Value {
        let re = |c: &CMat| mat_to_rows(&c.map(|z| z.re));
        let im = |c: &CMat| mat_to_rows(&c.map(|z| z.im));
        let mut v = json!({
            "m": self.dim(),
            "d": self.channels(),
            "hbar": self.hbar,
            "J": mat_to_rows(&self.j),
            "R": re(&self.r),
            "Lambda_re": re(&self.lambda),
            "Lambda_im": im(&self.lambda),
            "K_re": re(&self.k),
            "K_im": im(&self.k),
        });
        if self.r.iter().any(|z| z.im != 0.0) {
            v["R_im"] = json!(im(&self.r));
        }
        v
    }
}

fn get_usize(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    obj.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| Error::InvalidModel(format!("key `{key}`: expected a non-negative integer")))
}

fn parse_rows(key: &str, v: &Value) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::InvalidModel(format!("key `{key}`: expected a row-major array of number arrays"));
    v.as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|x| x.as_f64().ok_or_else(bad))
                .collect()
        })
        .collect()
}

pub(crate) fn get_matrix(obj: &Map<String, Value>, key: &str, shape: (usize, usize)) -> Result<Mat> {
    let v = obj
        .get(key)
        .ok_or_else(|| Error::InvalidModel(format!("missing key `{key}`")))?;
    let rows = parse_rows(key, v)?;
    if shape.0 == 0 || shape.1 == 0 {
        return Ok(Mat::zeros(shape.0, shape.1));
    }
    mat_from_rows(&format!("key `{key}`"), &rows, Some(shape))
}

fn get_matrix_or_zero(obj: &Map<String, Value>, key: &str, shape: (usize, usize)) -> Result<Mat> {
    if obj.contains_key(key) {
        get_matrix(obj, key, shape)
    } else {
        Ok(Mat::zeros(shape.0, shape.1))
    }
}

/// Symplectic data needed to monitor the Heisenberg bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Symplectic {
    pub j: Mat,
    pub hbar: f64,
}

/// Real coefficient matrices of the linear Langevin/output equations.
///
/// `c` may have a different number of rows than `b` has columns: dual
/// problems and purely classical test systems do not need `m = 2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    /// Drift.
    pub a: Mat,
    /// Control input.
    pub b: Mat,
    /// Output.
    pub c: Mat,
    /// Process-noise intensity, symmetric PSD.
    pub n: Mat,
    /// Process/measurement noise cross-covariance.
    pub m: Mat,
    /// Present when the coefficients come from a physical model.
    pub symplectic: Option<Symplectic>,
}

impl LinearCoefficients {
    pub fn new(a: Mat, b: Mat, c: Mat, n: Mat, m: Mat) -> Result<Self> {
        let dim = a.nrows();
        check_shape("A", &a, dim, dim)?;
        if b.nrows() != dim {
            return Err(Error::dims("B", format!("{dim} rows"), b.nrows()));
        }
        if c.ncols() != dim {
            return Err(Error::dims("C", format!("{dim} columns"), c.ncols()));
        }
        check_shape("N", &n, dim, dim)?;
        check_shape("M", &m, dim, c.nrows())?;
        if asymmetry(&n) > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidModel("N is not symmetric".into()));
        }
        let n = symmetrize(&n);
        if dim > 0 {
            let floor = SymmetricEigen::new(n.clone()).eigenvalues.min();
            if floor < -1e-12 * (1.0 + max_abs(&n)) {
                return Err(Error::InvalidModel(format!("N is not PSD (min eigenvalue {floor:e})")));
            }
        }
        let out = Self { a, b, c, n, m, symplectic: None };
        if [&out.a, &out.b, &out.c, &out.n, &out.m].iter().any(|x| !crate::linalg::all_finite(x)) {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        Ok(out)
    }

    pub fn with_symplectic(mut self, j: Mat, hbar: f64) -> Self {
        self.symplectic = Some(Symplectic { j, hbar });
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "A": mat_to_rows(&self.a),
            "B": mat_to_rows(&self.b),
            "C": mat_to_rows(&self.c),
            "N": mat_to_rows(&self.n),
            "M": mat_to_rows(&self.m),
        })
    }
}

/// Derives `A = J(R + ħ Im(Λ†Λ))`, `B = J(K + K*)`, `C = Λ + Λ*`,
/// `N = (ħ²/2) J(Λ†Λ + ΛᵀΛ*)Jᵀ` and `M = (iħ/2) J(Λᵀ − Λ†)`.
pub fn build_coefficients(model: &PhaseSpaceModel) -> Result<LinearCoefficients> {
    let hbar = model.hbar;
    let j = to_complex(&model.j);
    let lam = &model.lambda;
    let lam_conj = lam.map(|z| z.conj());
    let lam_dag = lam.adjoint();
    let lam_t = lam.transpose();
    let i = c64(0.0, 1.0);

    let dag_lam = &lam_dag * lam;
    let t_conj = &lam_t * &lam_conj;
    // Im(Λ†Λ) = (Λ†Λ − ΛᵀΛ*) / 2i
    let im_part = (&dag_lam - &t_conj) / (i * 2.0);

    let a = &j * (&model.r + im_part * c64(hbar, 0.0));
    let b = &j * (&model.k + model.k.map(|z| z.conj()));
    let c = lam + &lam_conj;
    let n = &j * (&dag_lam + &t_conj) * j.transpose() * c64(0.5 * hbar * hbar, 0.0);
    let m = &j * (&lam_t - &lam_dag) * (i * (0.5 * hbar));

    let a = real_part_checked(&a, "A", IMAG_TOLERANCE)?;
    let b = real_part_checked(&b, "B", IMAG_TOLERANCE)?;
    let c = real_part_checked(&c, "C", IMAG_TOLERANCE)?;
    let n = real_part_checked(&n, "N", IMAG_TOLERANCE)?;
    let m = real_part_checked(&m, "M", IMAG_TOLERANCE)?;

    Ok(LinearCoefficients::new(a, b, c, symmetrize(&n), m)?.with_symplectic(model.j.clone(), hbar))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyReport {
    pub pass: bool,
    pub min_eigenvalue: f64,
}

/// Checks `Σ + (iħ/2)J ⪰ 0`; antisymmetry of `J` makes the `−` side
/// equivalent.
pub fn check_uncertainty(cov: &Mat, j: &Mat, hbar: f64) -> UncertaintyReport {
    let half = 0.5 * hbar;
    let h = CMat::from_fn(cov.nrows(), cov.ncols(), |r, s| c64(cov[(r, s)], half * j[(r, s)]));
    let min_eigenvalue = crate::linalg::hermitian_min_eigenvalue(&h);
    UncertaintyReport { pass: min_eigenvalue >= -UNCERTAINTY_TOLERANCE, min_eigenvalue }
}

/// Free particle of mass `mass`: `H(u) = P²/2M − uQ`, observed through
/// `L = Q`.
pub fn free_particle_model(mass: f64, hbar: f64) -> Result<PhaseSpaceModel> {
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::InvalidParameter(format!("mass must be positive, got {mass}")));
    }
    if !(hbar.is_finite() && hbar > 0.0) {
        return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
    }
    PhaseSpaceModel::new(
        standard_symplectic(1),
        Mat::from_diagonal(&Vector::from_vec(vec![0.0, 1.0 / mass])),
        CMat::from_row_slice(1, 2, &[c64(1.0, 0.0), c64(0.0, 0.0)]),
        CMat::from_row_slice(2, 1, &[c64(-0.5, 0.0), c64(0.0, 0.0)]),
        hbar,
    )
}

/// Block-diagonal `J` for `pairs` canonical (Q, P) pairs ordered
/// `(Q₁, P₁, Q₂, P₂, …)`.
pub fn standard_symplectic(pairs: usize) -> Mat {
    let mut j = Mat::zeros(2 * pairs, 2 * pairs);
    for p in 0..pairs {
        j[(2 * p, 2 * p + 1)] = 1.0;
        j[(2 * p + 1, 2 * p)] = -1.0;
    }
    j
}

/// Posterior mean and covariance of a Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: Mat,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        let m = mean.len();
        check_shape("belief covariance", &cov, m, m)?;
        if asymmetry(&cov) > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov: symmetrize(&cov) })
    }

    /// As [`GaussianBelief::new`], additionally requiring the Heisenberg
    /// bound for the given symplectic structure.
    pub fn physical(mean: Vector, cov: Mat, j: &Mat, hbar: f64) -> Result<Self> {
        let belief = Self::new(mean, cov)?;
        let report = check_uncertainty(&belief.cov, j, hbar);
        if !report.pass {
            return Err(Error::UncertaintyViolation { t: 0.0, min_eig: report.min_eigenvalue });
        }
        Ok(belief)
    }
}
