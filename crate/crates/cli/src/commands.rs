use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::{json, Map, Value};

use qlqg_core::control::{control_gain_path, duality_map, FilterProblem, Permutation};
use qlqg_core::linalg::{mat_to_rows, CMat, Mat, Vector};
use qlqg_core::model::check_uncertainty;
use qlqg_core::riccati::{
    cost_breakdown, integrate_control_riccati, integrate_filter_riccati, lyapunov_unconditional, CostSpec,
};
use qlqg_core::sim::{monte_carlo_expected_cost, simulate_closed_loop, ClosedLoopPlan, EnsembleSummary, SimConfig};
use qlqg_core::sme::{
    ensemble_average, master_flow, simulate_sme_ensemble, trace_distance, ConstantPolicy, SmeConfig,
};
use qlqg_core::validate::{run_validation, Fixture};
use qlqg_core::{build_coefficients, free_particle_model, Execution, GaussianBelief, TimeGrid};

use crate::scenario::Scenario;

/// A run that completed but whose numbers failed a check; exits with 3.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Direction {
    Filter,
    Control,
    Both,
}

pub struct RunContext {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub n_traj: Option<usize>,
}

fn create(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let path = out.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::create_dir_all(out)?;
    fs::write(out.join(name), text).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn build(s: &Scenario, ctx: &RunContext) -> anyhow::Result<()> {
    let coeffs = build_coefficients(&s.phase_space_model()?)?;
    let doc = coeffs.to_json_value();
    write_json(&ctx.out, "coefficients.json", &doc)?;
    print_json(&doc)
}

pub fn riccati(s: &Scenario, ctx: &RunContext, direction: Direction, dual: bool) -> anyhow::Result<()> {
    let coeffs = build_coefficients(&s.phase_space_model()?)?;
    let grid = s.grid()?;
    let (m, d) = (coeffs.state_dim(), coeffs.control_dim());
    let mut summary = Map::new();

    let filter = if dual || direction != Direction::Control {
        let initial = s.initial(m)?;
        let sigma = integrate_filter_riccati(&coeffs, &initial.cov, &grid)?;
        sigma.write_csv(create(&ctx.out, "sigma.csv")?, "S")?;
        summary.insert("filter_endpoint".into(), json!(mat_to_rows(sigma.last())));
        Some((initial, sigma))
    } else {
        None
    };

    if dual {
        let (initial, sigma) = filter.as_ref().expect("dual mode integrates the filter");
        let perm = s.permutation.clone().map(Permutation::new).transpose()?;
        let problem = FilterProblem::from_coefficients(&coeffs, initial.cov.clone(), grid);
        let image = duality_map(&problem, perm.as_ref())?;
        let omega = integrate_control_riccati(&image.coefficients()?, &image.cost()?, &grid)?;
        omega.write_csv(create(&ctx.out, "omega.csv")?, "O")?;
        let p = perm.as_ref().map_or_else(|| Mat::identity(m, m), Permutation::matrix);
        let n = grid.n_steps;
        let deviation = (0..=n)
            .map(|k| (&p * &omega.values[n - k] * p.transpose() - &sigma.values[k]).amax())
            .fold(0.0, f64::max);
        summary.insert("control_initial".into(), json!(mat_to_rows(omega.first())));
        summary.insert("dual_max_deviation".into(), json!(deviation));
    } else if direction != Direction::Filter {
        let cost = s.cost(m, d)?;
        let omega = integrate_control_riccati(&coeffs, &cost, &grid)?;
        let gains = control_gain_path(&omega, &coeffs, &cost)?;
        omega.write_csv(create(&ctx.out, "omega.csv")?, "O")?;
        gains.write_csv(create(&ctx.out, "gains.csv")?)?;
        summary.insert("control_initial".into(), json!(mat_to_rows(omega.first())));
        if let Some((initial, sigma)) = &filter {
            let parts = cost_breakdown(&initial.mean, &initial.cov, &omega, sigma, &coeffs, &cost)?;
            summary.insert("total_cost".into(), json!(parts.total()));
            summary.insert("alpha0".into(), json!(parts.noise_integral + parts.gain_integral));
        }
    }

    write_json(&ctx.out, "riccati.json", &summary)?;
    print_json(&summary)
}

pub fn simulate(s: &Scenario, ctx: &RunContext) -> anyhow::Result<()> {
    let model = s.phase_space_model()?;
    let coeffs = build_coefficients(&model)?;
    let grid = s.grid()?;
    let (m, d) = (coeffs.state_dim(), coeffs.control_dim());
    let cost = s.cost(m, d)?;
    let initial = s.initial(m)?;
    let n_traj = ctx.n_traj.unwrap_or(s.sim.n_traj);
    let seed = ctx.seed.unwrap_or(s.sim.seed);
    let stride = s.sim.record_stride.unwrap_or(grid.n_steps);

    let plan = ClosedLoopPlan::from_coefficients(&coeffs, &cost, &initial, &grid)?;
    let config = SimConfig::new(grid, n_traj, seed, stride)?;
    let ensemble = simulate_closed_loop(&plan, &config)?;
    let estimate = monte_carlo_expected_cost(&ensemble, &cost)?;
    let summary = EnsembleSummary::new(estimate, seed, plan.analytic_cost()?);

    for (i, tr) in ensemble.trajectories.iter().take(s.sim.write_trajectories).enumerate() {
        tr.write_csv(create(&ctx.out, &format!("trajectory_{i:05}.csv"))?)?;
    }
    write_json(&ctx.out, "summary.json", &summary)?;
    print_json(&summary)
}

pub fn sme(s: &Scenario, ctx: &RunContext) -> anyhow::Result<()> {
    let model = s.finite_model()?;
    let cfg_json = s.sme()?;
    let grid = s.grid()?;
    let rho0 = cfg_json.initial_state(model.dim())?;
    let observables = cfg_json.observables(model.dim())?;
    let control = if cfg_json.control.is_empty() { vec![0.0; model.control_dim()] } else { cfg_json.control.clone() };
    if control.len() != model.control_dim() {
        bail!("key `sme.control`: expected {} entries, got {}", model.control_dim(), control.len());
    }
    let n_traj = ctx.n_traj.unwrap_or(cfg_json.n_traj);
    let seed = ctx.seed.unwrap_or(s.sim.seed);
    let mut config = SmeConfig::new(grid, seed, cfg_json.record_stride.unwrap_or(grid.n_steps))?;
    config.scheme = cfg_json.scheme.into();

    let trajectories = simulate_sme_ensemble(&rho0, &model, &ConstantPolicy(control.clone()), &config, n_traj)?;
    let last = trajectories[0].states.len() - 1;
    let average = ensemble_average(&trajectories, last)?;
    let master = master_flow(&rho0, &model, &control, &grid)?;
    let distance = trace_distance(&average, master.last().expect("flow includes t0").matrix());

    let expectation = |rho: &CMat, x: &CMat| (rho * x).trace().re;
    let mut final_mean = Map::new();
    for (name, x) in &observables {
        final_mean.insert(name.clone(), json!(expectation(&average, x)));
    }
    let summary = json!({
        "n_traj": n_traj,
        "seed": seed,
        "scheme": format!("{:?}", config.scheme).to_lowercase(),
        "min_eigenvalue": trajectories.iter().map(|t| t.min_eigenvalue).fold(f64::INFINITY, f64::min),
        "max_trace_deviation": trajectories.iter().map(|t| t.max_trace_deviation).fold(0.0, f64::max),
        "final_ensemble_expectations": final_mean,
        "trace_distance_to_master": distance,
    });

    let named: Vec<(&str, CMat)> = observables.iter().map(|(n, x)| (n.as_str(), x.clone())).collect();
    for (i, tr) in trajectories.iter().take(cfg_json.write_trajectories).enumerate() {
        tr.write_csv(create(&ctx.out, &format!("sme_trajectory_{i:05}.csv"))?, &named)?;
    }
    write_json(&ctx.out, "sme_summary.json", &summary)?;
    print_json(&summary)
}

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    expected: f64,
    tolerance: f64,
    passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        let passed = (value - expected).abs() <= tolerance;
        Self { name: name.into(), value, expected, tolerance, passed }
    }
}

/// Reproduces the closed-form free-particle results: stationary posterior
/// dispersions, saturation of the uncertainty bound, cubic spreading of the
/// unconditioned state, and the optimal cost against Monte Carlo.
pub fn free_particle(s: &Scenario, ctx: &RunContext) -> anyhow::Result<()> {
    let (mass, hbar) = match s.preset {
        Some(crate::scenario::Preset::FreeParticle { mass, hbar }) => (mass, hbar),
        None => (1.0, 1.0),
    };
    let model = free_particle_model(mass, hbar)?;
    let coeffs = build_coefficients(&model)?;
    let mut checks = Vec::new();

    let long = TimeGrid::with_step(20.0, 1e-3)?;
    let sigma = integrate_filter_riccati(&coeffs, &Mat::from_diagonal_element(2, 2, 2.0), &long)?;
    sigma.write_csv(create(&ctx.out, "free_particle_sigma.csv")?, "S")?;
    let end = sigma.last();
    let expected = [0.5 * (hbar / mass).sqrt(), hbar / 2.0, hbar * (hbar * mass).sqrt()];
    for (name, v, e) in [
        ("sigma_Q", end[(0, 0)], expected[0]),
        ("sigma_QP", end[(0, 1)], expected[1]),
        ("sigma_P", end[(1, 1)], expected[2]),
    ] {
        checks.push(Check::new(name, v, e, 1e-6));
    }
    checks.push(Check::new("uncertainty_product", (end[(0, 0)] * end[(1, 1)]).sqrt(), hbar / 2f64.sqrt(), 1e-6));
    let worst = sigma.values.iter().map(|s| check_uncertainty(s, &model.j, hbar).min_eigenvalue).fold(f64::INFINITY, f64::min);
    checks.push(Check { name: "uncertainty_min_eigenvalue".into(), value: worst, expected: 0.0, tolerance: 1e-8, passed: worst >= -1e-8 });

    let (sq, sqp, sp) = (0.5, 0.1, 0.7 * hbar * hbar);
    let cubic = lyapunov_unconditional(&coeffs, &Mat::from_row_slice(2, 2, &[sq, sqp, sqp, sp]), &TimeGrid::with_step(5.0, 1e-2)?)?;
    let t: f64 = 5.0;
    let poly = sq + 2.0 * sqp * t / mass + sp * t * t / (mass * mass) + hbar * hbar * t.powi(3) / (3.0 * mass * mass);
    checks.push(Check::new("unconditional_sigma_Q_t5", cubic.last()[(0, 0)], poly, 1e-8));

    let cost = CostSpec::new(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), Mat::zeros(1, 2), Mat::identity(2, 2))?;
    let initial = GaussianBelief::new(Vector::from_vec(vec![1.0, 0.0]), Mat::from_diagonal_element(2, 2, 0.5))?;
    let grid = TimeGrid::with_step(5.0, 1e-3)?;
    let plan = ClosedLoopPlan::from_coefficients(&coeffs, &cost, &initial, &grid)?;
    let seed = ctx.seed.unwrap_or(s.sim.seed);
    let n_traj = ctx.n_traj.unwrap_or(10_000);
    let ensemble = simulate_closed_loop(&plan, &SimConfig::new(grid, n_traj, seed, grid.n_steps)?)?;
    let summary = EnsembleSummary::new(monte_carlo_expected_cost(&ensemble, &cost)?, seed, plan.analytic_cost()?);
    checks.push(Check::new("cost_z_score", summary.z_score, 0.0, 3.0));

    let report = json!({ "mass": mass, "hbar": hbar, "checks": checks, "ensemble": summary });
    write_json(&ctx.out, "free_particle.json", &report)?;
    for c in &checks {
        println!(
            "{} {}: {:.10} (expected {:.10}, tolerance {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.expected,
            c.tolerance
        );
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(NumericalFailure("free-particle reproduction failed".into()).into())
    }
}

pub fn validate(ctx: &RunContext, inject: &[Fixture]) -> anyhow::Result<()> {
    let start = Instant::now();
    let report = run_validation(inject, Execution::Parallel);
    for suite in &report.suites {
        println!(
            "{} {} ({:.2} s): {}",
            if suite.passed { "PASS" } else { "FAIL" },
            suite.name,
            suite.seconds,
            suite.detail
        );
    }
    println!("total {:.2} s", start.elapsed().as_secs_f64());
    // Timings vary run to run, so the file keeps only the verdicts.
    let stable: Vec<Value> =
        report.suites.iter().map(|s| json!({ "name": s.name, "passed": s.passed, "detail": s.detail })).collect();
    write_json(&ctx.out, "validation.json", &json!({ "passed": report.passed(), "suites": stable }))?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect();
        Err(NumericalFailure(format!("validation failed: {}", failed.join(", "))).into())
    }
}
