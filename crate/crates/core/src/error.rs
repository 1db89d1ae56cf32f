use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("coefficient {name} has imaginary residue {residue:e} (limit 1e-12)")]
    NonRealCoefficient { name: &'static str, residue: f64 },

    #[error("covariance violates the uncertainty bound at t = {t}: min eigenvalue {min_eig:e}")]
    UncertaintyViolation { t: f64, min_eig: f64 },

    #[error("non-finite value in {context} at t = {t}")]
    NonFinite { context: &'static str, t: f64 },

    #[error("no convergence after t = {t_max} (last derivative norm {residual:e})")]
    NoConvergence { t_max: f64, residual: f64 },

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("density matrix lost positivity: min eigenvalue {min_eig:e} at t = {t}")]
    PositivityLoss { t: f64, min_eig: f64 },

    #[error("projectors do not form an orthogonal resolution of identity: {0}")]
    NotAProjectorFamily(String),

    #[error("operator is not unitary (deviation {0:e})")]
    NotUnitary(f64),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics (blow-up, positivity, convergence)
    /// as opposed to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::UncertaintyViolation { .. }
                | Error::NonFinite { .. }
                | Error::NoConvergence { .. }
                | Error::PositivityLoss { .. }
        )
    }

    pub(crate) fn dims(
        context: &'static str,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
