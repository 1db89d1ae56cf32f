//! Monte Carlo simulation of the filter + optimal controller closed loop.
//!
//! The loop is simulated in innovations form: `dỸ ~ N(0, dt·I)` is drawn
//! directly and drives
//!
//! ```text
//! u = −L̃_t X̂,    X̂ ← X̂ + (AX̂ + Bu) dt + K̃_t dỸ
//! ```
//!
//! The conditional covariance `Σ_t` and the gains are deterministic and
//! precomputed in a [`ClosedLoopPlan`]. Each trajectory owns a ChaCha
//! stream selected by its index, so ensembles are bit-identical for a given
//! seed regardless of how the work is scheduled.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::control::{control_gain_path, ControlGainPath};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::TimeGrid;
use crate::linalg::{frobenius_inner, Mat, Vector};
use crate::model::{build_coefficients, GaussianBelief, LinearCoefficients, PhaseSpaceModel};
use crate::riccati::{
    integrate_control_riccati, integrate_filter_riccati, total_minimal_cost, CostSpec, MatrixPath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Wiener,
    /// Every innovation is zero; the mean follows the deterministic
    /// closed-loop ODE.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid: TimeGrid,
    pub n_traj: usize,
    pub seed: u64,
    pub record_stride: usize,
    pub noise: NoiseMode,
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(grid: TimeGrid, n_traj: usize, seed: u64, record_stride: usize) -> Result<Self> {
        let cfg = Self { grid, n_traj, seed, record_stride, noise: NoiseMode::Wiener, execution: Execution::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_traj == 0 {
            return Err(Error::Config("n_traj must be at least 1".into()));
        }
        if self.record_stride == 0 || self.grid.n_steps % self.record_stride != 0 {
            return Err(Error::Config(format!(
                "record_stride {} must divide n_steps {}",
                self.record_stride, self.grid.n_steps
            )));
        }
        Ok(())
    }
}

/// Everything deterministic about the closed loop.
#[derive(Debug, Clone)]
pub struct ClosedLoopPlan {
    pub coeffs: LinearCoefficients,
    pub cost: CostSpec,
    pub initial: GaussianBelief,
    pub sigma_path: MatrixPath,
    pub omega_path: MatrixPath,
    pub gains: ControlGainPath,
}

impl ClosedLoopPlan {
    pub fn new(model: &PhaseSpaceModel, cost: &CostSpec, initial: &GaussianBelief, grid: &TimeGrid) -> Result<Self> {
        Self::from_coefficients(&build_coefficients(model)?, cost, initial, grid)
    }

    pub fn from_coefficients(
        coeffs: &LinearCoefficients,
        cost: &CostSpec,
        initial: &GaussianBelief,
        grid: &TimeGrid,
    ) -> Result<Self> {
        if initial.mean.len() != coeffs.state_dim() {
            return Err(Error::dims("initial mean", coeffs.state_dim(), initial.mean.len()));
        }
        let sigma_path = integrate_filter_riccati(coeffs, &initial.cov, grid)?;
        let omega_path = integrate_control_riccati(coeffs, cost, grid)?;
        let gains = control_gain_path(&omega_path, coeffs, cost)?;
        Ok(Self { coeffs: coeffs.clone(), cost: cost.clone(), initial: initial.clone(), sigma_path, omega_path, gains })
    }

    /// Replaces the optimal gains, e.g. by a perturbed schedule.
    pub fn with_gains(mut self, gains: ControlGainPath) -> Result<Self> {
        gains.grid.ensure_same(&self.sigma_path.grid, "gain schedule")?;
        if gains.gains.iter().any(|g| g.shape() != (self.coeffs.control_dim(), self.coeffs.state_dim())) {
            return Err(Error::dims("gain schedule", "d x m", "other"));
        }
        self.gains = gains;
        Ok(self)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.sigma_path.grid
    }

    /// The minimal expected cost predicted by the Riccati solutions.
    pub fn analytic_cost(&self) -> Result<f64> {
        total_minimal_cost(
            &self.initial.mean,
            &self.initial.cov,
            &self.omega_path,
            &self.sigma_path,
            &self.coeffs,
            &self.cost,
        )
    }
}

/// One simulated trajectory thinned to every `record_stride`-th grid point.
///
/// `measurements`/`innovations` hold the increment over the step ending at
/// the recorded time (zero at `t0`); `running_cost` is the cost integral up
/// to that time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub means: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub measurements: Vec<Vector>,
    pub innovations: Vec<Vector>,
    pub running_cost: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn final_mean(&self) -> &Vector {
        self.means.last().expect("records include t0")
    }

    pub fn final_running_cost(&self) -> f64 {
        *self.running_cost.last().expect("records include t0")
    }

    /// CSV columns: `t, xhat_i…, u_j…, dY_j…, dYtilde_j…, cost`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let m = self.means[0].len();
        let du = self.controls[0].len();
        let dy = self.measurements[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|i| format!("xhat_{i}")));
        header.extend((0..du).map(|i| format!("u_{i}")));
        header.extend((0..dy).map(|i| format!("dY_{i}")));
        header.extend((0..dy).map(|i| format!("dYtilde_{i}")));
        header.push("cost".into());
        w.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            for v in [&self.means[k], &self.controls[k], &self.measurements[k], &self.innovations[k]] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            row.push(self.running_cost[k].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trajectories: Vec<TrajectoryRecord>,
    /// `Σ_T`, shared by every trajectory.
    pub terminal_cov: Mat,
    pub seed: u64,
}

impl Ensemble {
    /// Sample mean and covariance of `X̂` at record index `r`.
    pub fn mean_moments(&self, r: usize) -> (Vector, Mat) {
        let n = self.trajectories.len() as f64;
        let m = self.trajectories[0].means[r].len();
        let mut mean = Vector::zeros(m);
        for tr in &self.trajectories {
            mean += &tr.means[r];
        }
        mean /= n;
        let mut cov = Mat::zeros(m, m);
        for tr in &self.trajectories {
            let d = &tr.means[r] - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1.0).max(1.0);
        (mean, cov)
    }
}

/// `⟨ρ, C(u)⟩` for a Gaussian state: `X̂ᵀFX̂ + Tr[FΣ] + 2uᵀGX̂ + uᵀu`.
pub fn running_posterior_cost(xhat: &Vector, sigma: &Mat, u: &Vector, cost: &CostSpec) -> f64 {
    (xhat.transpose() * &cost.f * xhat)[(0, 0)]
        + frobenius_inner(&cost.f, sigma)
        + 2.0 * (u.transpose() * &cost.g * xhat)[(0, 0)]
        + u.dot(u)
}

/// Per-step data flattened row-major for the inner loop.
struct StepTables {
    m: usize,
    du: usize,
    dy: usize,
    /// A − B L̃_k
    closed: Vec<f64>,
    /// K̃_k
    kalman: Vec<f64>,
    /// L̃_k
    feedback: Vec<f64>,
    /// Tr[F Σ_k]
    cov_cost: Vec<f64>,
    c: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl StepTables {
    fn new(plan: &ClosedLoopPlan) -> Self {
        let co = &plan.coeffs;
        let (m, du, dy) = (co.state_dim(), co.control_dim(), co.output_dim());
        let mut closed = Vec::with_capacity(plan.gains.gains.len() * m * m);
        let mut kalman = Vec::new();
        let mut feedback = Vec::new();
        let mut cov_cost = Vec::new();
        for (l, s) in plan.gains.gains.iter().zip(&plan.sigma_path.values) {
            closed.extend(row_major(&(&co.a - &co.b * l)));
            kalman.extend(row_major(&(s * co.c.transpose() + &co.m)));
            feedback.extend(row_major(l));
            cov_cost.push(frobenius_inner(&plan.cost.f, s));
        }
        Self {
            m,
            du,
            dy,
            closed,
            kalman,
            feedback,
            cov_cost,
            c: row_major(&co.c),
            f: row_major(&plan.cost.f),
            g: row_major(&plan.cost.g),
        }
    }
}

fn mat_vec(out: &mut [f64], a: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * cols..(i + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn quad(a: &[f64], x: &[f64]) -> f64 {
    let m = x.len();
    (0..m).map(|i| x[i] * a[i * m..(i + 1) * m].iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).sum()
}

fn simulate_one(plan: &ClosedLoopPlan, tables: &StepTables, config: &SimConfig, index: usize) -> Result<TrajectoryRecord> {
    let StepTables { m, du, dy, .. } = *tables;
    let grid = config.grid;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let stride = config.record_stride;
    let n_records = grid.n_steps / stride + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let mut x: Vec<f64> = plan.initial.mean.iter().copied().collect();
    let mut drift = vec![0.0; m];
    let mut u = vec![0.0; du];
    let mut gx = vec![0.0; du];
    let mut innov = vec![0.0; dy];
    let mut cx = vec![0.0; dy];
    let mut last_dy = vec![0.0; dy];
    let mut last_innov = vec![0.0; dy];

    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(n_records),
        means: Vec::with_capacity(n_records),
        controls: Vec::with_capacity(n_records),
        measurements: Vec::with_capacity(n_records),
        innovations: Vec::with_capacity(n_records),
        running_cost: Vec::with_capacity(n_records),
    };

    let mut integral = 0.0;
    let mut prev_cost = 0.0;
    for k in 0..=grid.n_steps {
        mat_vec(&mut u, &tables.feedback[k * du * m..(k + 1) * du * m], &x);
        u.iter_mut().for_each(|v| *v = -*v);
        mat_vec(&mut gx, &tables.g, &x);
        let c_k = quad(&tables.f, &x)
            + tables.cov_cost[k]
            + 2.0 * u.iter().zip(&gx).map(|(p, q)| p * q).sum::<f64>()
            + u.iter().map(|v| v * v).sum::<f64>();
        if k > 0 {
            integral += 0.5 * dt * (prev_cost + c_k);
        }
        prev_cost = c_k;

        if k % stride == 0 {
            if !x.iter().all(|v| v.is_finite()) || !integral.is_finite() {
                return Err(Error::NonFinite { context: "closed-loop simulation", t: grid.time(k) });
            }
            rec.times.push(grid.time(k));
            rec.means.push(Vector::from_column_slice(&x));
            rec.controls.push(Vector::from_column_slice(&u));
            rec.measurements.push(Vector::from_column_slice(&last_dy));
            rec.innovations.push(Vector::from_column_slice(&last_innov));
            rec.running_cost.push(integral);
        }
        if k == grid.n_steps {
            break;
        }

        for v in innov.iter_mut() {
            *v = match config.noise {
                NoiseMode::Wiener => sqrt_dt * rng.sample::<f64, _>(StandardNormal),
                NoiseMode::Zero => 0.0,
            };
        }
        mat_vec(&mut cx, &tables.c, &x);
        for j in 0..dy {
            last_dy[j] = innov[j] + cx[j] * dt;
            last_innov[j] = innov[j];
        }
        mat_vec(&mut drift, &tables.closed[k * m * m..(k + 1) * m * m], &x);
        let kal = &tables.kalman[k * m * dy..(k + 1) * m * dy];
        for i in 0..m {
            let noise: f64 = kal[i * dy..(i + 1) * dy].iter().zip(&innov).map(|(p, q)| p * q).sum();
            x[i] += drift[i] * dt + noise;
        }
    }
    Ok(rec)
}

/// Runs `config.n_traj` independent closed-loop trajectories.
pub fn simulate_closed_loop(plan: &ClosedLoopPlan, config: &SimConfig) -> Result<Ensemble> {
    config.validate()?;
    config.grid.ensure_same(plan.grid(), "simulation grid")?;
    let tables = StepTables::new(plan);
    let trajectories = config
        .execution
        .try_map(config.n_traj, |i| simulate_one(plan, &tables, config, i))?;
    Ok(Ensemble { trajectories, terminal_cov: plan.sigma_path.last().clone(), seed: config.seed })
}

/// Sample mean and standard error of a scalar population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    /// NaN for a single sample.
    pub stderr: f64,
    pub n: usize,
}

impl CostEstimate {
    /// Welford accumulation in index order.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        let n = samples.len();
        let stderr = if n < 2 { f64::NAN } else { (m2 / (n - 1) as f64 / n as f64).sqrt() };
        Ok(Self { mean, stderr, n })
    }
}

/// Total per-trajectory cost: running integral plus `X̂_TᵀΩ_T X̂_T + Tr[Ω_TΣ_T]`.
pub fn trajectory_costs(ensemble: &Ensemble, cost: &CostSpec) -> Vec<f64> {
    let terminal_cov = frobenius_inner(&cost.omega_t, &ensemble.terminal_cov);
    ensemble
        .trajectories
        .iter()
        .map(|tr| {
            let x = tr.final_mean();
            tr.final_running_cost() + (x.transpose() * &cost.omega_t * x)[(0, 0)] + terminal_cov
        })
        .collect()
}

pub fn monte_carlo_expected_cost(ensemble: &Ensemble, cost: &CostSpec) -> Result<CostEstimate> {
    CostEstimate::from_samples(&trajectory_costs(ensemble, cost))
}

/// Summary written by the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub mean_cost: f64,
    pub stderr: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub analytic_cost: f64,
    pub z_score: f64,
}

impl EnsembleSummary {
    pub fn new(estimate: CostEstimate, seed: u64, analytic_cost: f64) -> Self {
        Self {
            mean_cost: estimate.mean,
            stderr: estimate.stderr,
            n_traj: estimate.n,
            seed,
            analytic_cost,
            z_score: (estimate.mean - analytic_cost) / estimate.stderr,
        }
    }
}
