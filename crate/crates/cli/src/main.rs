mod commands;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Direction, NumericalFailure, RunContext};
use qlqg_core::validate::Fixture;
use scenario::Scenario;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "qlqg", version, about = "Quantum filtering and LQG feedback control")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario JSON document.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: the scenario's `out`, else ./qlqg_out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the number of trajectories.
    #[arg(long = "n-traj", global = true)]
    n_traj: Option<usize>,

    /// Worker threads for ensemble simulation.
    #[arg(long, global = true, env = "QLQG_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the coefficient matrices A, B, C, N, M.
    Build,
    /// Integrate the filter and/or control Riccati equations.
    Riccati {
        #[arg(long, value_enum, default_value_t = Direction::Both)]
        direction: Direction,
        /// Obtain the control solution from the dual of the filter problem.
        #[arg(long)]
        dual: bool,
    },
    /// Closed-loop Monte Carlo of the optimal controller.
    Simulate,
    /// Stochastic master equation trajectories of a finite model.
    Sme,
    /// Reproduce the closed-form free-particle results.
    FreeParticle,
    /// Run the property suites.
    Validate {
        /// Inject a failure fixture: gain-perturbation or coarse-sme.
        #[arg(long)]
        inject: Vec<Fixture>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!("QLQG_THREADS must be at least 1");
        }
        qlqg_core::exec::configure_threads(n);
    }
    let needs_scenario = matches!(cli.command, Command::Build | Command::Riccati { .. } | Command::Simulate | Command::Sme);
    let scenario = match &cli.scenario {
        Some(p) => Scenario::load(p)?,
        None if needs_scenario => anyhow::bail!("--scenario is required for this command"),
        None => Scenario::empty(),
    };
    let ctx = RunContext {
        out: cli.out.clone().or_else(|| scenario.out.clone()).unwrap_or_else(|| PathBuf::from("qlqg_out")),
        seed: cli.seed,
        n_traj: cli.n_traj,
    };
    match &cli.command {
        Command::Build => commands::build(&scenario, &ctx),
        Command::Riccati { direction, dual } => commands::riccati(&scenario, &ctx, *direction, *dual),
        Command::Simulate => commands::simulate(&scenario, &ctx),
        Command::Sme => commands::sme(&scenario, &ctx),
        Command::FreeParticle => commands::free_particle(&scenario, &ctx),
        Command::Validate { inject } => commands::validate(&ctx, inject),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>() || e.downcast_ref::<qlqg_core::Error>().is_some_and(qlqg_core::Error::is_numerical)
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
