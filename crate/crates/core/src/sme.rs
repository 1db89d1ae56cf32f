//! Finite-dimensional density-matrix engine.
//!
//! Conventions, for a model with Hamiltonian `H(u) = H₀ + Σ uₖHₖ` and
//! coupling operators `Lᵢ`:
//!
//! ```text
//! G(u)    = (i/ħ)H(u) + ½ Σ Lᵢ†Lᵢ
//! 𝓛*[ρ]  = −Gρ − ρG† + Σ LᵢρLᵢ†          (master equation, Schrödinger picture)
//! 𝓛[X]   = −G†X − XG + Σ Lᵢ†XLᵢ          (Heisenberg picture)
//! σᵢ(ρ)   = Lᵢρ + ρLᵢ† − ⟨ρ, Lᵢ+Lᵢ†⟩ρ
//! dρ      = 𝓛*[ρ]dt + Σ σᵢ(ρ)(dYᵢ − ⟨ρ, Lᵢ+Lᵢ†⟩dt)
//! ```
//!
//! Trajectories are simulated in innovations form,
//! `dYᵢ = ⟨ρ, Lᵢ+Lᵢ†⟩dt + dWᵢ`.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::TimeGrid;
use crate::linalg::{c64, hermitian_deviation, hermitian_min_eigenvalue, trace, trace_norm_hermitian, CMat};

/// Tolerances of a valid [`DensityMatrix`].
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;
pub const TRACE_TOLERANCE: f64 = 1e-9;
pub const EIGEN_TOLERANCE: f64 = 1e-8;
/// Steps fail below this eigenvalue; something between this and
/// [`EIGEN_TOLERANCE`] is kept but visible in trajectory diagnostics.
pub const POSITIVITY_FAILURE: f64 = 1e-6;
const MODEL_HERMITIAN_TOLERANCE: f64 = 1e-12;
const UNITARY_TOLERANCE: f64 = 1e-10;
const PROJECTOR_TOLERANCE: f64 = 1e-10;
/// Outcomes with probability below this get a null posterior.
const NULL_PROBABILITY: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: CMat,
}

impl DensityMatrix {
    pub fn new(rho: CMat) -> Result<Self> {
        if !rho.is_square() || rho.nrows() == 0 {
            return Err(Error::InvalidState(format!("shape {:?} is not square", rho.shape())));
        }
        if rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        let herm = hermitian_deviation(&rho);
        if herm > HERMITIAN_TOLERANCE {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {herm:e})")));
        }
        let tr = trace(&rho);
        if (tr - c64(1.0, 0.0)).norm() > TRACE_TOLERANCE {
            return Err(Error::InvalidState(format!("trace {tr} is not 1")));
        }
        let min_eig = hermitian_min_eigenvalue(&rho);
        if min_eig < -EIGEN_TOLERANCE {
            return Err(Error::InvalidState(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(Self { rho })
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalised) vector.
    pub fn pure(psi: &DVector<Complex64>) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidState("state vector has zero or non-finite norm".into()));
        }
        let v = psi / c64(norm, 0.0);
        Self::new(&v * v.adjoint())
    }

    pub fn maximally_mixed(n: usize) -> Result<Self> {
        Self::new(CMat::identity(n, n) / c64(n as f64, 0.0))
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.rho
    }

    pub fn into_matrix(self) -> CMat {
        self.rho
    }

    /// `Tr[ρX]`.
    pub fn expectation(&self, x: &CMat) -> Complex64 {
        trace_product(&self.rho, x)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_min_eigenvalue(&self.rho)
    }
}

/// `Tr[AB]` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> Complex64 {
    let n = a.nrows();
    let mut acc = c64(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// `½‖A − B‖₁` for Hermitian arguments.
pub fn trace_distance(a: &CMat, b: &CMat) -> f64 {
    0.5 * trace_norm_hermitian(&(a - b))
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(1.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0)])
}

pub fn pauli_y() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(0.0, -1.0), c64(0.0, 1.0), c64(0.0, 0.0)])
}

pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-1.0, 0.0)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteModel {
    pub h0: CMat,
    pub h_controls: Vec<CMat>,
    pub l_list: Vec<CMat>,
    pub hbar: f64,
}

impl FiniteModel {
    pub fn new(h0: CMat, h_controls: Vec<CMat>, l_list: Vec<CMat>, hbar: f64) -> Result<Self> {
        let n = h0.nrows();
        if !h0.is_square() || n == 0 {
            return Err(Error::InvalidModel(format!("H0 has shape {:?}", h0.shape())));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
        }
        for (name, op) in std::iter::once(("H0", &h0)).chain(h_controls.iter().map(|h| ("H_controls", h))) {
            if op.shape() != (n, n) {
                return Err(Error::dims(name, format!("{n}x{n}"), format!("{:?}", op.shape())));
            }
            let dev = hermitian_deviation(op);
            if dev > MODEL_HERMITIAN_TOLERANCE {
                return Err(Error::InvalidModel(format!("{name} is not Hermitian (deviation {dev:e})")));
            }
        }
        if let Some(l) = l_list.iter().find(|l| l.shape() != (n, n)) {
            return Err(Error::dims("L_list", format!("{n}x{n}"), format!("{:?}", l.shape())));
        }
        Ok(Self { h0, h_controls, l_list, hbar })
    }

    pub fn dim(&self) -> usize {
        self.h0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.l_list.len()
    }

    pub fn control_dim(&self) -> usize {
        self.h_controls.len()
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::dims("control", self.control_dim(), u.len()));
        }
        Ok(())
    }

    pub fn hamiltonian(&self, u: &[f64]) -> Result<CMat> {
        self.check_control(u)?;
        let mut h = self.h0.clone();
        for (hk, &uk) in self.h_controls.iter().zip(u) {
            h += hk * c64(uk, 0.0);
        }
        Ok(h)
    }

    /// `G(u) = (i/ħ)H(u) + ½ΣL†L`.
    pub fn generator(&self, u: &[f64]) -> Result<CMat> {
        let mut g = self.hamiltonian(u)? * c64(0.0, 1.0 / self.hbar);
        for l in &self.l_list {
            g += l.adjoint() * l * c64(0.5, 0.0);
        }
        Ok(g)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json_value(&serde_json::from_str(s)?)
    }

    /// `{dim, H0, H_controls[], L_list[], hbar}` with complex matrices as
    /// `{re, im}` pairs; `im` may be omitted.
    pub fn from_json_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config("finite model must be a JSON object".into()))?;
        if let Some(k) = obj.keys().find(|k| !["dim", "hbar", "H0", "H_controls", "L_list"].contains(&k.as_str())) {
            return Err(Error::Config(format!("finite model has unknown key '{k}'")));
        }
        let dim = obj
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Config("finite model key 'dim' missing or not an integer".into()))?
            as usize;
        let hbar = match obj.get("hbar") {
            None => 1.0,
            Some(h) => h.as_f64().ok_or_else(|| Error::Config("finite model key 'hbar' must be a number".into()))?,
        };
        let h0 = complex_matrix_from_json(
            obj.get("H0").ok_or_else(|| Error::Config("finite model key 'H0' missing".into()))?,
            "H0",
            dim,
        )?;
        let list = |key: &str| -> Result<Vec<CMat>> {
            match obj.get(key) {
                None => Ok(Vec::new()),
                Some(Value::Array(items)) => items
                    .iter()
                    .enumerate()
                    .map(|(i, item)| complex_matrix_from_json(item, &format!("{key}[{i}]"), dim))
                    .collect(),
                Some(_) => Err(Error::Config(format!("finite model key '{key}' must be an array"))),
            }
        };
        Self::new(h0, list("H_controls")?, list("L_list")?, hbar)
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "dim": self.dim(),
            "hbar": self.hbar,
            "H0": complex_to_json(&self.h0),
            "H_controls": self.h_controls.iter().map(complex_to_json).collect::<Vec<_>>(),
            "L_list": self.l_list.iter().map(complex_to_json).collect::<Vec<_>>(),
        })
    }
}

fn real_rows(v: &Value, key: &str, dim: usize) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("finite model key '{key}' must be a {dim}x{dim} array of numbers"));
    let rows = v.as_array().ok_or_else(bad)?;
    if rows.len() != dim {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(dim * dim);
    for row in rows {
        let row = row.as_array().ok_or_else(bad)?;
        if row.len() != dim {
            return Err(bad());
        }
        for x in row {
            out.push(x.as_f64().ok_or_else(bad)?);
        }
    }
    Ok(out)
}

/// `{re, im}` pair of `dim`×`dim` row-major arrays; `im` may be omitted.
/// Errors name `key`.
pub fn complex_matrix_from_json(v: &Value, key: &str, dim: usize) -> Result<CMat> {
    let re = real_rows(
        v.get("re").ok_or_else(|| Error::Config(format!("finite model key '{key}.re' missing")))?,
        &format!("{key}.re"),
        dim,
    )?;
    let im = match v.get("im") {
        None => vec![0.0; dim * dim],
        Some(im) => real_rows(im, &format!("{key}.im"), dim)?,
    };
    let entries: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| c64(a, b)).collect();
    Ok(CMat::from_row_slice(dim, dim, &entries))
}

fn complex_to_json(m: &CMat) -> Value {
    let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect()).collect()
    };
    json!({ "re": rows(|z| z.re), "im": rows(|z| z.im) })
}

fn check_square(context: &'static str, x: &CMat, n: usize) -> Result<()> {
    if x.shape() != (n, n) {
        return Err(Error::dims(context, format!("{n}x{n}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

/// Heisenberg-picture generator `𝓛[X]`.
pub fn lindblad_heisenberg(x: &CMat, model: &FiniteModel, u: &[f64]) -> Result<CMat> {
    check_square("observable", x, model.dim())?;
    let g = model.generator(u)?;
    let g_adj = g.adjoint();
    let mut out = -(&g_adj * x) - x * &g;
    for l in &model.l_list {
        out += l.adjoint() * x * l;
    }
    Ok(out)
}

/// Schrödinger-picture generator `𝓛*[ρ]`; accepts any square matrix so the
/// adjoint identity can be checked on arbitrary arguments.
pub fn lindblad_dual(rho: &CMat, model: &FiniteModel, u: &[f64]) -> Result<CMat> {
    check_square("state", rho, model.dim())?;
    let g = model.generator(u)?;
    lindblad_dual_with(rho, &g, model)
}

fn lindblad_dual_with(rho: &CMat, g: &CMat, model: &FiniteModel) -> Result<CMat> {
    let x = g * rho;
    let mut out = -(&x) - x.adjoint();
    for l in &model.l_list {
        out += l * rho * l.adjoint();
    }
    Ok(out)
}

fn hermitize_in_place(m: &mut CMat) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

fn positivity_guard(rho: &CMat, t: f64) -> Result<f64> {
    let min_eig = hermitian_min_eigenvalue(rho);
    if !min_eig.is_finite() || min_eig < -POSITIVITY_FAILURE {
        return Err(Error::PositivityLoss { t, min_eig });
    }
    Ok(min_eig)
}

fn check_step(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {dt}")));
    }
    Ok(())
}

/// One RK4 step of the master equation.
pub fn master_step(rho: &DensityMatrix, model: &FiniteModel, u: &[f64], dt: f64) -> Result<DensityMatrix> {
    check_step(dt)?;
    check_square("state", rho.matrix(), model.dim())?;
    let g = model.generator(u)?;
    let r0 = rho.matrix();
    let f = |r: &CMat| lindblad_dual_with(r, &g, model);
    let h = c64(dt, 0.0);
    let half = c64(0.5 * dt, 0.0);
    let k1 = f(r0)?;
    let k2 = f(&(r0 + &k1 * half))?;
    let k3 = f(&(r0 + &k2 * half))?;
    let k4 = f(&(r0 + &k3 * h))?;
    let mut next = r0 + (k1 + k2 * c64(2.0, 0.0) + k3 * c64(2.0, 0.0) + k4) * c64(dt / 6.0, 0.0);
    hermitize_in_place(&mut next);
    positivity_guard(&next, f64::NAN)?;
    Ok(DensityMatrix { rho: next })
}

/// Integrates the master equation over `grid`, returning every grid point.
pub fn master_flow(rho0: &DensityMatrix, model: &FiniteModel, u: &[f64], grid: &TimeGrid) -> Result<Vec<DensityMatrix>> {
    grid.validate()?;
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.len());
    out.push(rho0.clone());
    for k in 0..grid.n_steps {
        let next = master_step(&out[k], model, u, dt).map_err(|e| with_time(e, grid.time(k + 1)))?;
        out.push(next);
    }
    Ok(out)
}

fn with_time(e: Error, t: f64) -> Error {
    match e {
        Error::PositivityLoss { min_eig, .. } => Error::PositivityLoss { t, min_eig },
        other => other,
    }
}

/// `σ(ρ) = Lρ + ρL† − ⟨ρ, L+L†⟩ρ`.
pub fn fluctuation(rho: &CMat, l: &CMat) -> CMat {
    let y = l * rho;
    let c = 2.0 * trace(&y).re;
    &y + y.adjoint() - rho * c64(c, 0.0)
}

/// Reusable buffers for the allocation-free trajectory steppers.
struct Workspace {
    g: CMat,
    l_adj: Vec<CMat>,
    kraus: CMat,
    x: CMat,
    y: CMat,
    z: CMat,
    next: CMat,
}

impl Workspace {
    fn new(model: &FiniteModel) -> Result<Self> {
        let n = model.dim();
        let zero = CMat::zeros(n, n);
        Ok(Self {
            g: model.generator(&vec![0.0; model.control_dim()])?,
            l_adj: model.l_list.iter().map(|l| l.adjoint()).collect(),
            kraus: zero.clone(),
            x: zero.clone(),
            y: zero.clone(),
            z: zero.clone(),
            next: zero,
        })
    }

    fn set_control(&mut self, model: &FiniteModel, u: &[f64]) -> Result<()> {
        if !u.is_empty() {
            self.g = model.generator(u)?;
        }
        Ok(())
    }

    /// `⟨ρ, Lᵢ+Lᵢ†⟩` into `c`.
    fn output_means(&self, model: &FiniteModel, rho: &CMat, c: &mut [f64]) {
        for (ci, l) in c.iter_mut().zip(&model.l_list) {
            *ci = 2.0 * trace_product(l, rho).re;
        }
    }

    /// Euler–Maruyama step of the SME into `self.next` (unnormalised).
    fn euler(&mut self, model: &FiniteModel, rho: &CMat, dy: &[f64], c: &[f64], dt: f64) {
        let n = rho.nrows();
        self.g.mul_to(rho, &mut self.x);
        for i in 0..n {
            for j in 0..n {
                self.next[(i, j)] = rho[(i, j)] - (self.x[(i, j)] + self.x[(j, i)].conj()) * dt;
            }
        }
        for (idx, l) in model.l_list.iter().enumerate() {
            l.mul_to(rho, &mut self.y);
            self.y.mul_to(&self.l_adj[idx], &mut self.z);
            let w = dy[idx] - c[idx] * dt;
            for i in 0..n {
                for j in 0..n {
                    self.next[(i, j)] +=
                        self.z[(i, j)] * dt + (self.y[(i, j)] + self.y[(j, i)].conj() - rho[(i, j)] * c[idx]) * w;
                }
            }
        }
    }

    /// `MρM†` with `M = I − G dt + Σ Lᵢ dYᵢ` into `self.next`.
    fn kraus(&mut self, model: &FiniteModel, rho: &CMat, dy: &[f64], dt: f64) {
        let n = rho.nrows();
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                self.kraus[(i, j)] = c64(id, 0.0) - self.g[(i, j)] * dt;
            }
        }
        for (l, &d) in model.l_list.iter().zip(dy) {
            self.kraus.zip_apply(l, |k, li| *k += li * d);
        }
        self.kraus.mul_to(rho, &mut self.x);
        self.x.adjoint_to(&mut self.y);
        self.kraus.mul_to(&self.y, &mut self.next);
    }
}

/// Hermitises and renormalises `next` into `rho`; returns `|Tr − 1|` after
/// normalisation.
fn finish_step(next: &CMat, rho: &mut CMat) -> f64 {
    let n = next.nrows();
    let tr: f64 = (0..n).map(|i| next[(i, i)].re).sum();
    for i in 0..n {
        for j in 0..n {
            rho[(i, j)] = 0.5 * (next[(i, j)] + next[(j, i)].conj()) / tr;
        }
    }
    let after: f64 = (0..n).map(|i| rho[(i, i)].re).sum();
    (after - 1.0).abs()
}

fn check_increment(model: &FiniteModel, dy: &[f64]) -> Result<()> {
    if dy.len() != model.channels() {
        return Err(Error::dims("measurement increment", model.channels(), dy.len()));
    }
    if dy.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("measurement increment is not finite".into()));
    }
    Ok(())
}

/// One Euler–Maruyama step of the filtering equation, followed by
/// Hermitisation and trace renormalisation.
pub fn sme_step(rho: &DensityMatrix, model: &FiniteModel, u: &[f64], dy: &[f64], dt: f64) -> Result<DensityMatrix> {
    check_step(dt)?;
    check_square("state", rho.matrix(), model.dim())?;
    check_increment(model, dy)?;
    let mut ws = Workspace::new(model)?;
    ws.set_control(model, u)?;
    let mut c = vec![0.0; model.channels()];
    ws.output_means(model, rho.matrix(), &mut c);
    ws.euler(model, rho.matrix(), dy, &c, dt);
    let mut out = CMat::zeros(model.dim(), model.dim());
    finish_step(&ws.next, &mut out);
    positivity_guard(&out, f64::NAN)?;
    Ok(DensityMatrix { rho: out })
}

/// One step of the Kraus-form discretisation
/// `ρ ← MρM†/Tr[MρM†]`, `M = I − G(u)dt + Σ LᵢdYᵢ`.
///
/// It agrees with [`sme_step`] to the same order but keeps ρ positive
/// semidefinite for every increment.
pub fn sme_kraus_step(rho: &DensityMatrix, model: &FiniteModel, u: &[f64], dy: &[f64], dt: f64) -> Result<DensityMatrix> {
    check_step(dt)?;
    check_square("state", rho.matrix(), model.dim())?;
    check_increment(model, dy)?;
    let mut ws = Workspace::new(model)?;
    ws.set_control(model, u)?;
    ws.kraus(model, rho.matrix(), dy, dt);
    let mut out = CMat::zeros(model.dim(), model.dim());
    finish_step(&ws.next, &mut out);
    positivity_guard(&out, f64::NAN)?;
    Ok(DensityMatrix { rho: out })
}

/// Feedback law `u = π(t, ρ)`, written into `u`.
pub trait ControlPolicy: Sync {
    fn control(&self, t: f64, rho: &CMat, u: &mut [f64]);
}

/// Always applies the same control vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstantPolicy(pub Vec<f64>);

impl ControlPolicy for ConstantPolicy {
    fn control(&self, _t: f64, _rho: &CMat, u: &mut [f64]) {
        u.copy_from_slice(&self.0);
    }
}

impl<F> ControlPolicy for F
where
    F: Fn(f64, &CMat, &mut [f64]) + Sync,
{
    fn control(&self, t: f64, rho: &CMat, u: &mut [f64]) {
        self(t, rho, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmeScheme {
    /// Plain Euler–Maruyama, as [`sme_step`].
    Euler,
    /// Positivity-preserving Kraus form, as [`sme_kraus_step`].
    #[default]
    Kraus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmeConfig {
    pub grid: TimeGrid,
    pub seed: u64,
    pub record_stride: usize,
    pub scheme: SmeScheme,
    pub execution: Execution,
}

impl SmeConfig {
    pub fn new(grid: TimeGrid, seed: u64, record_stride: usize) -> Result<Self> {
        let cfg = Self { grid, seed, record_stride, scheme: SmeScheme::default(), execution: Execution::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.record_stride == 0 || self.grid.n_steps % self.record_stride != 0 {
            return Err(Error::Config(format!(
                "record_stride {} must divide n_steps {}",
                self.record_stride, self.grid.n_steps
            )));
        }
        Ok(())
    }
}

/// A filtered trajectory thinned to every `record_stride`-th step.
/// `measurements[r]` is the increment over the step ending at `times[r]`
/// (zero at `t0`); `controls[r]` is the control applied from `times[r]`.
/// The diagnostics cover every step, not only the recorded ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SmeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub measurements: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
    pub max_trace_deviation: f64,
}

impl SmeTrajectory {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("records include t0")
    }

    /// CSV with `t, Re⟨X⟩…, dY…, u…` for the given observables.
    pub fn write_csv<W: std::io::Write>(&self, out: W, observables: &[(&str, CMat)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(observables.iter().map(|(name, _)| format!("exp_{name}")));
        header.extend((0..self.measurements[0].len()).map(|i| format!("dY_{i}")));
        header.extend((0..self.controls[0].len()).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for r in 0..self.times.len() {
            let mut row = vec![self.times[r].to_string()];
            row.extend(observables.iter().map(|(_, x)| self.states[r].expectation(x).re.to_string()));
            row.extend(self.measurements[r].iter().map(|x| x.to_string()));
            row.extend(self.controls[r].iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_trajectory(
    rho0: &DensityMatrix,
    model: &FiniteModel,
    policy: &dyn ControlPolicy,
    config: &SmeConfig,
    stream: u64,
) -> Result<SmeTrajectory> {
    check_square("initial state", rho0.matrix(), model.dim())?;
    let grid = config.grid;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let d = model.channels();
    let n_records = grid.n_steps / config.record_stride + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut ws = Workspace::new(model)?;
    let mut rho = rho0.matrix().clone();
    let mut u = vec![0.0; model.control_dim()];
    let mut c = vec![0.0; d];
    let mut dy = vec![0.0; d];

    let mut traj = SmeTrajectory {
        times: Vec::with_capacity(n_records),
        states: Vec::with_capacity(n_records),
        measurements: Vec::with_capacity(n_records),
        controls: Vec::with_capacity(n_records),
        min_eigenvalue: rho0.min_eigenvalue(),
        max_trace_deviation: (trace(rho0.matrix()).re - 1.0).abs(),
    };

    for k in 0..=grid.n_steps {
        let t = grid.time(k);
        policy.control(t, &rho, &mut u);
        if k % config.record_stride == 0 {
            traj.times.push(t);
            traj.states.push(DensityMatrix { rho: rho.clone() });
            traj.measurements.push(dy.clone());
            traj.controls.push(u.clone());
        }
        if k == grid.n_steps {
            break;
        }
        ws.set_control(model, &u)?;
        ws.output_means(model, &rho, &mut c);
        for (dyi, ci) in dy.iter_mut().zip(&c) {
            *dyi = ci * dt + sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
        match config.scheme {
            SmeScheme::Euler => ws.euler(model, &rho, &dy, &c, dt),
            SmeScheme::Kraus => ws.kraus(model, &rho, &dy, dt),
        }
        let dev = finish_step(&ws.next, &mut rho);
        let t_next = grid.time(k + 1);
        if !dev.is_finite() {
            return Err(Error::NonFinite { context: "sme trajectory", t: t_next });
        }
        let min_eig = positivity_guard(&rho, t_next)?;
        traj.min_eigenvalue = traj.min_eigenvalue.min(min_eig);
        traj.max_trace_deviation = traj.max_trace_deviation.max(dev);
    }
    Ok(traj)
}

/// One innovations-driven filter trajectory, deterministic given the seed.
pub fn simulate_sme_trajectory(
    rho0: &DensityMatrix,
    model: &FiniteModel,
    policy: &dyn ControlPolicy,
    config: &SmeConfig,
) -> Result<SmeTrajectory> {
    config.validate()?;
    run_trajectory(rho0, model, policy, config, 0)
}

/// `n_traj` independent trajectories; trajectory `i` uses RNG stream `i`,
/// so the first one equals [`simulate_sme_trajectory`].
pub fn simulate_sme_ensemble(
    rho0: &DensityMatrix,
    model: &FiniteModel,
    policy: &dyn ControlPolicy,
    config: &SmeConfig,
    n_traj: usize,
) -> Result<Vec<SmeTrajectory>> {
    config.validate()?;
    if n_traj == 0 {
        return Err(Error::Config("n_traj must be at least 1".into()));
    }
    config.execution.try_map(n_traj, |i| run_trajectory(rho0, model, policy, config, i as u64))
}

/// Mean state at record index `r`.
pub fn ensemble_average(trajectories: &[SmeTrajectory], r: usize) -> Result<CMat> {
    let first = trajectories.first().ok_or(Error::EmptyEnsemble)?;
    let mut acc = CMat::zeros(first.states[r].dim(), first.states[r].dim());
    for tr in trajectories {
        acc += tr.states[r].matrix();
    }
    Ok(acc / c64(trajectories.len() as f64, 0.0))
}

/// `∫ (Re⟨ρ_t, C⟩ + w|u_t|²) dt` over the recorded points by the trapezoid
/// rule; exact integration requires `record_stride = 1`.
pub fn sme_running_cost(traj: &SmeTrajectory, cost_op: &CMat, control_weight: f64) -> f64 {
    let c: Vec<f64> = traj
        .states
        .iter()
        .zip(&traj.controls)
        .map(|(s, u)| s.expectation(cost_op).re + control_weight * u.iter().map(|x| x * x).sum::<f64>())
        .collect();
    traj.times.windows(2).zip(c.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Result of one measurement outcome. `posterior` is `None` when the
/// outcome has (numerically) zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningOutcome {
    pub probability: f64,
    pub posterior: Option<DensityMatrix>,
}

fn unitary_deviation(u: &CMat) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - CMat::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_projectors(projectors: &[CMat], k: usize) -> Result<()> {
    if projectors.is_empty() {
        return Err(Error::NotAProjectorFamily("empty family".into()));
    }
    let max_entry = |m: &CMat| m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut sum = CMat::zeros(k, k);
    for (i, p) in projectors.iter().enumerate() {
        if p.shape() != (k, k) {
            return Err(Error::NotAProjectorFamily(format!("projector {i} has shape {:?}", p.shape())));
        }
        if hermitian_deviation(p) > PROJECTOR_TOLERANCE || max_entry(&(p * p - p)) > PROJECTOR_TOLERANCE {
            return Err(Error::NotAProjectorFamily(format!("element {i} is not an orthogonal projector")));
        }
        for (j, q) in projectors.iter().enumerate().skip(i + 1) {
            if q.shape() == (k, k) && max_entry(&(p * q)) > PROJECTOR_TOLERANCE {
                return Err(Error::NotAProjectorFamily(format!("elements {i} and {j} are not orthogonal")));
            }
        }
        sum += p;
    }
    if max_entry(&(sum - CMat::identity(k, k))) > PROJECTOR_TOLERANCE {
        return Err(Error::NotAProjectorFamily("projectors do not sum to the identity".into()));
    }
    Ok(())
}

/// `Tr_F` over the second tensor factor of dimension `k`.
fn partial_trace_ancilla(x: &CMat, n: usize, k: usize) -> CMat {
    CMat::from_fn(n, n, |i, j| (0..k).map(|a| x[(i * k + a, j * k + a)]).sum())
}

/// Bayes conditioning of `ρ` on the outcomes of a projective ancilla
/// measurement after the interaction `U` on system ⊗ ancilla (ancilla index
/// fastest), with the ancilla prepared in `φ`.
pub fn discrete_conditioning(
    rho: &DensityMatrix,
    unitary: &CMat,
    ancilla: &DVector<Complex64>,
    projectors: &[CMat],
) -> Result<Vec<ConditioningOutcome>> {
    let n = rho.dim();
    let k = ancilla.len();
    if unitary.shape() != (n * k, n * k) {
        return Err(Error::dims("interaction unitary", format!("{}x{}", n * k, n * k), format!("{:?}", unitary.shape())));
    }
    let dev = unitary_deviation(unitary);
    if !(dev <= UNITARY_TOLERANCE) {
        return Err(Error::NotUnitary(dev));
    }
    check_projectors(projectors, k)?;
    let norm = ancilla.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidState("ancilla vector has zero norm".into()));
    }
    let phi = ancilla / c64(norm, 0.0);
    let joint = rho.matrix().kronecker(&(&phi * phi.adjoint()));
    let evolved = unitary * joint * unitary.adjoint();
    let id = CMat::identity(n, n);
    projectors
        .iter()
        .map(|p| {
            let reduced = partial_trace_ancilla(&(&evolved * id.kronecker(p)), n, k);
            let probability = trace(&reduced).re.max(0.0);
            let posterior = if probability < NULL_PROBABILITY {
                None
            } else {
                let mut post = reduced / c64(probability, 0.0);
                hermitize_in_place(&mut post);
                Some(DensityMatrix::new(post)?)
            };
            Ok(ConditioningOutcome { probability, posterior })
        })
        .collect()
}

/// `exp(√dt (L⊗σ₊ − L†⊗σ₋))` with `σ₊ = |1⟩⟨0|` on a two-level ancilla.
pub fn weak_measurement_unitary(l: &CMat, dt: f64) -> Result<CMat> {
    check_step(dt)?;
    let zero = c64(0.0, 0.0);
    let one = c64(1.0, 0.0);
    let raise = CMat::from_row_slice(2, 2, &[zero, zero, one, zero]);
    let lower = raise.adjoint();
    let gen = (l.kronecker(&raise) - l.adjoint().kronecker(&lower)) * c64(dt.sqrt(), 0.0);
    Ok(gen.exp())
}

/// Weak ancilla interaction followed by a homodyne (`|±⟩`) readout.
/// Outcome 0 corresponds to `dY = +√dt`, outcome 1 to `dY = −√dt`.
pub fn weak_measurement_step(rho: &DensityMatrix, l: &CMat, dt: f64) -> Result<Vec<ConditioningOutcome>> {
    check_square("coupling operator", l, rho.dim())?;
    let u = weak_measurement_unitary(l, dt)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let plus = DVector::from_vec(vec![c64(s, 0.0), c64(s, 0.0)]);
    let minus = DVector::from_vec(vec![c64(s, 0.0), c64(-s, 0.0)]);
    let projectors = [&plus * plus.adjoint(), &minus * minus.adjoint()];
    let ground = DVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)]);
    discrete_conditioning(rho, &u, &ground, &projectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plus_state() -> DensityMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DensityMatrix::pure(&DVector::from_vec(vec![c64(s, 0.0), c64(s, 0.0)])).unwrap()
    }

    fn dephasing() -> FiniteModel {
        FiniteModel::new(CMat::zeros(2, 2), vec![], vec![pauli_z()], 1.0).unwrap()
    }

    fn random_matrix(n: usize, entries: &[f64]) -> CMat {
        CMat::from_fn(n, n, |i, j| c64(entries[2 * (i * n + j)], entries[2 * (i * n + j) + 1]))
    }

    fn random_state(n: usize, entries: &[f64]) -> DensityMatrix {
        let a = random_matrix(n, entries);
        let r = &a * a.adjoint() + CMat::identity(n, n) * c64(0.05, 0.0);
        let tr = trace(&r);
        DensityMatrix::new(hermitize_tmp(r / tr)).unwrap()
    }

    fn hermitize_tmp(mut m: CMat) -> CMat {
        hermitize_in_place(&mut m);
        m
    }

    fn random_model(n: usize, e: &[f64]) -> FiniteModel {
        let h = random_matrix(n, &e[0..2 * n * n]);
        let h = (&h + h.adjoint()) * c64(0.5, 0.0);
        let hc = random_matrix(n, &e[2 * n * n..4 * n * n]);
        let hc = (&hc + hc.adjoint()) * c64(0.5, 0.0);
        let l1 = random_matrix(n, &e[4 * n * n..6 * n * n]);
        let l2 = random_matrix(n, &e[6 * n * n..8 * n * n]);
        FiniteModel::new(h, vec![hc], vec![l1, l2], 0.7).unwrap()
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::maximally_mixed(3).is_ok());
        let bad_trace = CMat::identity(2, 2);
        assert!(matches!(DensityMatrix::new(bad_trace), Err(Error::InvalidState(_))));
        let negative = CMat::from_row_slice(2, 2, &[c64(1.5, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-0.5, 0.0)]);
        assert!(matches!(DensityMatrix::new(negative), Err(Error::InvalidState(_))));
        let skew = CMat::from_row_slice(2, 2, &[c64(0.5, 0.0), c64(0.1, 0.0), c64(0.0, 0.0), c64(0.5, 0.0)]);
        assert!(matches!(DensityMatrix::new(skew), Err(Error::InvalidState(_))));
    }

    #[test]
    fn model_rejects_non_hermitian_hamiltonian() {
        let h = CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)]);
        assert!(matches!(FiniteModel::new(h, vec![], vec![], 1.0), Err(Error::InvalidModel(_))));
        assert!(FiniteModel::new(pauli_x(), vec![], vec![], 0.0).is_err());
        assert!(matches!(
            FiniteModel::new(pauli_x(), vec![], vec![CMat::zeros(3, 3)], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unitality_and_dephasing_generator() {
        let m = dephasing();
        assert_eq!(lindblad_heisenberg(&CMat::identity(2, 2), &m, &[]).unwrap(), CMat::zeros(2, 2));
        let lx = lindblad_heisenberg(&pauli_x(), &m, &[]).unwrap();
        assert!((lx + pauli_x() * c64(2.0, 0.0)).camax() < 1e-15);
    }

    #[test]
    fn zero_model_leaves_state_unchanged() {
        let m = FiniteModel::new(CMat::zeros(2, 2), vec![], vec![], 1.0).unwrap();
        let rho = plus_state();
        assert_eq!(master_step(&rho, &m, &[], 0.1).unwrap(), rho);
    }

    #[test]
    fn dephasing_decay_matches_closed_form() {
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let flow = master_flow(&plus_state(), &dephasing(), &[], &grid).unwrap();
        for (k, rho) in flow.iter().enumerate().step_by(100) {
            let expected = 0.5 * (-2.0 * grid.time(k)).exp();
            assert!((rho.matrix()[(0, 1)].re - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn flow_derivative_matches_heisenberg_generator() {
        let e: Vec<f64> = (0..200).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let m = random_model(3, &e);
        let rho = random_state(3, &e[100..]);
        let x = random_matrix(3, &e[40..]);
        let x = (&x + x.adjoint()) * c64(0.5, 0.0);
        let u = [0.3];
        let h = 1e-4;
        // Central difference built from a forward and a backward flow.
        let fwd = master_step(&rho, &m, &u, h).unwrap();
        let back = {
            let g = m.generator(&u).unwrap();
            let r = rho.matrix();
            let f = |s: &CMat| -lindblad_dual_with(s, &g, &m).unwrap();
            let k1 = f(r);
            let k2 = f(&(r + &k1 * c64(h / 2.0, 0.0)));
            let k3 = f(&(r + &k2 * c64(h / 2.0, 0.0)));
            let k4 = f(&(r + &k3 * c64(h, 0.0)));
            r + (k1 + k2 * c64(2.0, 0.0) + k3 * c64(2.0, 0.0) + k4) * c64(h / 6.0, 0.0)
        };
        let fd = (fwd.expectation(&x) - trace_product(&back, &x)).re / (2.0 * h);
        let gen = rho.expectation(&lindblad_heisenberg(&x, &m, &u).unwrap()).re;
        assert!((fd - gen).abs() < 1e-6, "{fd} vs {gen}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn adjoint_identity(e in proptest::collection::vec(-1.0f64..1.0, 4 * 2 * 9 + 18 + 18), u in -2.0f64..2.0) {
            let m = random_model(3, &e);
            let rho = random_state(3, &e[72..]);
            let x = random_matrix(3, &e[90..]);
            let x = (&x + x.adjoint()) * c64(0.5, 0.0);
            let lhs = trace_product(&lindblad_dual(rho.matrix(), &m, &[u]).unwrap(), &x);
            let rhs = trace_product(rho.matrix(), &lindblad_heisenberg(&x, &m, &[u]).unwrap());
            prop_assert!((lhs - rhs).norm() < 1e-10);
            let lx = lindblad_heisenberg(&x, &m, &[u]).unwrap();
            prop_assert!(hermitian_deviation(&lx) < 1e-12);
        }

        #[test]
        fn fluctuation_is_traceless(e in proptest::collection::vec(-1.0f64..1.0, 36)) {
            let rho = random_state(3, &e);
            let l = random_matrix(3, &e[18..]);
            prop_assert!(trace(&fluctuation(rho.matrix(), &l)).norm() < 1e-13);
        }

        #[test]
        fn steps_preserve_invariants(e in proptest::collection::vec(-1.0f64..1.0, 4 * 2 * 4 + 8), dy in -0.05f64..0.05) {
            let m = random_model(2, &e);
            let rho = random_state(2, &e[32..]);
            for step in [sme_step, sme_kraus_step] {
                let next = step(&rho, &m, &[0.2], &[dy, -dy], 1e-3).unwrap();
                prop_assert!((trace(next.matrix()).re - 1.0).abs() < 1e-12);
                prop_assert_eq!(hermitian_deviation(next.matrix()), 0.0);
            }
            let next = master_step(&rho, &m, &[0.2], 1e-3).unwrap();
            prop_assert!((trace(next.matrix()).re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_coupling_sme_is_master_step_to_first_order() {
        let h = pauli_x() * c64(0.8, 0.0);
        let m = FiniteModel::new(h, vec![], vec![CMat::zeros(2, 2)], 1.0).unwrap();
        let rho = plus_state();
        let dt = 1e-4;
        let a = sme_step(&rho, &m, &[], &[0.37], dt).unwrap();
        let b = master_step(&rho, &m, &[], dt).unwrap();
        assert!((a.matrix() - b.matrix()).camax() < 1e-7);
    }

    #[test]
    fn coarse_euler_step_loses_positivity() {
        let r = sme_step(&plus_state(), &dephasing(), &[], &[0.7], 0.5);
        assert!(matches!(r, Err(Error::PositivityLoss { .. })));
        assert!(sme_kraus_step(&plus_state(), &dephasing(), &[], &[0.7], 0.5).is_ok());
    }

    #[test]
    fn uncoupled_trajectory_is_unitary() {
        let h = pauli_x() * c64(0.5, 0.0);
        let m = FiniteModel::new(h.clone(), vec![], vec![], 1.0).unwrap();
        let up = DensityMatrix::pure(&DVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)])).unwrap();
        let cfg = SmeConfig::new(TimeGrid::with_step(1.0, 1e-3).unwrap(), 5, 1000).unwrap();
        let tr = simulate_sme_trajectory(&up, &m, &ConstantPolicy::default(), &cfg).unwrap();
        // exp(−iHt)|0⟩ with H = σx/2 gives populations cos²(t/2), sin²(t/2).
        let p0 = tr.final_state().matrix()[(0, 0)].re;
        assert!((p0 - 0.5f64.cos().powi(2)).abs() < 1e-5);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let cfg = SmeConfig::new(TimeGrid::with_step(0.2, 1e-3).unwrap(), 77, 10).unwrap();
        let a = simulate_sme_ensemble(&plus_state(), &dephasing(), &ConstantPolicy::default(), &cfg, 4).unwrap();
        let b = simulate_sme_ensemble(&plus_state(), &dephasing(), &ConstantPolicy::default(), &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], simulate_sme_trajectory(&plus_state(), &dephasing(), &ConstantPolicy::default(), &cfg).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn feedback_policy_sees_filter_state() {
        let m = FiniteModel::new(CMat::zeros(2, 2), vec![pauli_x()], vec![pauli_z()], 1.0).unwrap();
        let policy = |_t: f64, rho: &CMat, u: &mut [f64]| u[0] = -rho[(0, 1)].im;
        let cfg = SmeConfig::new(TimeGrid::with_step(0.5, 1e-3).unwrap(), 3, 100).unwrap();
        let tr = simulate_sme_trajectory(&plus_state(), &m, &policy, &cfg).unwrap();
        for (s, u) in tr.states.iter().zip(&tr.controls) {
            assert_eq!(u[0], -s.matrix()[(0, 1)].im);
        }
    }

    #[test]
    fn running_cost_of_frozen_state() {
        let m = FiniteModel::new(CMat::zeros(2, 2), vec![pauli_x()], vec![], 1.0).unwrap();
        let rho = DensityMatrix::new(CMat::from_row_slice(
            2,
            2,
            &[c64(0.7, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(0.3, 0.0)],
        ))
        .unwrap();
        let cfg = SmeConfig::new(TimeGrid::with_step(2.0, 1e-2).unwrap(), 1, 1).unwrap();
        let tr = simulate_sme_trajectory(&rho, &m, &ConstantPolicy(vec![0.0]), &cfg).unwrap();
        let cost = sme_running_cost(&tr, &pauli_z(), 3.0);
        assert!((cost - 0.4 * 2.0).abs() < 1e-12);
        let tr = simulate_sme_trajectory(&rho, &FiniteModel::new(CMat::zeros(2, 2), vec![CMat::zeros(2, 2)], vec![], 1.0).unwrap(), &ConstantPolicy(vec![0.5]), &cfg).unwrap();
        assert!((sme_running_cost(&tr, &pauli_z(), 3.0) - (0.4 + 0.75) * 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_interaction_keeps_state() {
        let rho = plus_state();
        let zero = c64(0.0, 0.0);
        let one = c64(1.0, 0.0);
        let p0 = CMat::from_row_slice(2, 2, &[one, zero, zero, zero]);
        let p1 = CMat::from_row_slice(2, 2, &[zero, zero, zero, one]);
        let phi = DVector::from_vec(vec![one, zero]);
        let out = discrete_conditioning(&rho, &CMat::identity(4, 4), &phi, &[p0, p1]).unwrap();
        assert!((out[0].probability - 1.0).abs() < 1e-15);
        assert!((out[0].posterior.as_ref().unwrap().matrix() - rho.matrix()).camax() < 1e-15);
        assert_eq!(out[1].probability, 0.0);
        assert!(out[1].posterior.is_none());
    }

    #[test]
    fn cnot_conditioning_by_hand() {
        let zero = c64(0.0, 0.0);
        let one = c64(1.0, 0.0);
        #[rustfmt::skip]
        let cnot = CMat::from_row_slice(4, 4, &[
            one, zero, zero, zero,
            zero, one, zero, zero,
            zero, zero, zero, one,
            zero, zero, one, zero,
        ]);
        let p0 = CMat::from_row_slice(2, 2, &[one, zero, zero, zero]);
        let p1 = CMat::from_row_slice(2, 2, &[zero, zero, zero, one]);
        let phi = DVector::from_vec(vec![one, zero]);
        let out = discrete_conditioning(&plus_state(), &cnot, &phi, &[p0.clone(), p1.clone()]).unwrap();
        assert!((out[0].probability - 0.5).abs() < 1e-15);
        assert!((out[1].probability - 0.5).abs() < 1e-15);
        assert!((out[0].posterior.as_ref().unwrap().matrix() - &p0).camax() < 1e-15);
        assert!((out[1].posterior.as_ref().unwrap().matrix() - &p1).camax() < 1e-15);
    }

    #[test]
    fn conditioning_rejects_bad_inputs() {
        let zero = c64(0.0, 0.0);
        let one = c64(1.0, 0.0);
        let phi = DVector::from_vec(vec![one, zero]);
        let p0 = CMat::from_row_slice(2, 2, &[one, zero, zero, zero]);
        let p1 = CMat::from_row_slice(2, 2, &[zero, zero, zero, one]);
        let not_unitary = CMat::identity(4, 4) * c64(1.1, 0.0);
        assert!(matches!(
            discrete_conditioning(&plus_state(), &not_unitary, &phi, &[p0.clone(), p1.clone()]),
            Err(Error::NotUnitary(_))
        ));
        assert!(matches!(
            discrete_conditioning(&plus_state(), &CMat::identity(4, 4), &phi, &[p0.clone()]),
            Err(Error::NotAProjectorFamily(_))
        ));
        assert!(matches!(
            discrete_conditioning(&plus_state(), &CMat::identity(4, 4), &phi, &[p0.clone(), p0]),
            Err(Error::NotAProjectorFamily(_))
        ));
    }

    #[test]
    fn weak_unitary_is_unitary_and_probabilities_sum() {
        let l = pauli_z() * c64(0.3, 0.0) + CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(0.0, 0.0), c64(0.7, 0.0), c64(0.0, 0.0)]);
        let u = weak_measurement_unitary(&l, 1e-2).unwrap();
        assert!(unitary_deviation(&u) < 1e-13);
        let out = weak_measurement_step(&plus_state(), &l, 1e-2).unwrap();
        let total: f64 = out.iter().map(|o| o.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_model_json_round_trip_and_diagnostics() {
        let m = FiniteModel::new(pauli_x(), vec![pauli_y()], vec![pauli_z() * c64(0.5, 0.0)], 2.0).unwrap();
        let back = FiniteModel::from_json_value(&m.to_json_value()).unwrap();
        assert_eq!(back, m);
        let text = r#"{"dim": 2, "H0": {"re": [[0, 1], [1, 0]]}, "L_list": [{"re": [[1, 0], [0]]}]}"#;
        match FiniteModel::from_json_str(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("L_list[0].re"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
