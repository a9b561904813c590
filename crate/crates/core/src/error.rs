use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("Dyson equation solver failed at z={z}, w={w}: last residual {residual:e}")]
    SolverFailure { z: Complex64, w: Complex64, residual: f64 },

    #[error("branch of m is ambiguous at z={z}, E={energy}: density vanishes and no continuation anchor was supplied")]
    BranchAmbiguity { z: Complex64, energy: f64 },

    #[error("singular derivative at z={z}, w={w}: |1 - <M^2>| = {gap:e}")]
    SingularDerivative { z: Complex64, w: Complex64, gap: f64 },

    #[error("two-body stability system is degenerate (|det P| = {det:e}); increase eta")]
    StabilityDegenerate { det: f64 },

    #[error("covariance kernel D = {value:e} is too close to zero for log-differentiation")]
    LogSingularity { value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("characteristic flow reaches the real axis at t={time}")]
    FlowTermination { time: f64 },

    #[error("singular integral: a singular value is zero while the lower eta cutoff is zero")]
    SingularIntegral,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.display().to_string(), source }
    }

    /// True for problems with the inputs rather than with the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, LabError::Config { .. } | LabError::Domain(_) | LabError::InsufficientSamples { .. })
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
