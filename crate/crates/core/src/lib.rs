//! Linear quantum stochastic control: Gaussian phase-space models, the
//! filter and control Riccati equations, the separated LQG controller,
//! closed-loop Monte Carlo, and filtering of finite-dimensional systems
//! under continuous measurement.

pub mod control;
pub mod error;
pub mod exec;
pub mod grid;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod sme;
pub mod validate;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::TimeGrid;
pub use model::{build_coefficients, free_particle_model, GaussianBelief, LinearCoefficients, PhaseSpaceModel};
pub use riccati::CostSpec;
