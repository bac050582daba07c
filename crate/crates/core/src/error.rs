use thiserror::Error;

/// Machine-readable failure category. Each variant maps to one process
/// exit code in the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    ConfigInvalid,
    IntegrationDiverged,
    NearSingular,
    StepSizeGuard,
    InsufficientLags,
    TooFewSamples,
    NotPsd,
    DimensionMismatch,
    InvalidInput,
    OutsideLattice,
    Format,
    Io,
    /// A diagnostic ran but its acceptance check failed.
    CheckFailed,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 13] = [
        ErrorCategory::ConfigInvalid,
        ErrorCategory::IntegrationDiverged,
        ErrorCategory::NearSingular,
        ErrorCategory::StepSizeGuard,
        ErrorCategory::InsufficientLags,
        ErrorCategory::TooFewSamples,
        ErrorCategory::NotPsd,
        ErrorCategory::DimensionMismatch,
        ErrorCategory::InvalidInput,
        ErrorCategory::OutsideLattice,
        ErrorCategory::Format,
        ErrorCategory::Io,
        ErrorCategory::CheckFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::ConfigInvalid => "config-invalid",
            ErrorCategory::IntegrationDiverged => "integration-diverged",
            ErrorCategory::NearSingular => "near-singular",
            ErrorCategory::StepSizeGuard => "step-size-guard",
            ErrorCategory::InsufficientLags => "insufficient-lags",
            ErrorCategory::TooFewSamples => "too-few-samples",
            ErrorCategory::NotPsd => "not-psd",
            ErrorCategory::DimensionMismatch => "dimension-mismatch",
            ErrorCategory::InvalidInput => "invalid-input",
            ErrorCategory::OutsideLattice => "outside-lattice",
            ErrorCategory::Format => "format",
            ErrorCategory::Io => "io",
            ErrorCategory::CheckFailed => "check-failed",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::ConfigInvalid => 2,
            ErrorCategory::IntegrationDiverged => 3,
            ErrorCategory::NearSingular => 4,
            ErrorCategory::StepSizeGuard => 5,
            ErrorCategory::InsufficientLags => 6,
            ErrorCategory::TooFewSamples => 7,
            ErrorCategory::NotPsd => 8,
            ErrorCategory::DimensionMismatch => 9,
            ErrorCategory::InvalidInput => 10,
            ErrorCategory::OutsideLattice => 11,
            ErrorCategory::Format => 12,
            ErrorCategory::Io => 13,
            ErrorCategory::CheckFailed => 14,
        }
    }
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("{kind} driver diverged at step {step}: {detail}")]
    IntegrationDiverged {
        kind: &'static str,
        step: u64,
        detail: String,
    },

    #[error("near-singular mean-map Jacobian (min singular value {min_singular:.3e}) at x = {x:?}, c = {coeffs:?}")]
    NearSingular {
        min_singular: f64,
        x: Vec<f64>,
        coeffs: Vec<f64>,
    },

    #[error("step-size guard violated: {0}")]
    StepSizeGuard(String),

    #[error("insufficient lags: truncation at lag {needed} but only {available} available")]
    InsufficientLags { needed: usize, available: usize },

    #[error("too few samples: {got} samples, need more than {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("matrix is not positive semidefinite: clipped eigenvalue mass {clip:.3e} exceeds {limit:.3e}")]
    NotPsd { clip: f64, limit: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point {x:?} lies outside the coefficient lattice")]
    OutsideLattice { x: Vec<f64> },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Wraps an error with the module/operation that raised it.
    #[error("{module}::{operation}: {source}")]
    Context {
        module: &'static str,
        operation: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ConfigInvalid(_) => ErrorCategory::ConfigInvalid,
            Error::IntegrationDiverged { .. } => ErrorCategory::IntegrationDiverged,
            Error::NearSingular { .. } => ErrorCategory::NearSingular,
            Error::StepSizeGuard(_) => ErrorCategory::StepSizeGuard,
            Error::InsufficientLags { .. } => ErrorCategory::InsufficientLags,
            Error::TooFewSamples { .. } => ErrorCategory::TooFewSamples,
            Error::NotPsd { .. } => ErrorCategory::NotPsd,
            Error::DimensionMismatch { .. } => ErrorCategory::DimensionMismatch,
            Error::InvalidInput(_) => ErrorCategory::InvalidInput,
            Error::OutsideLattice { .. } => ErrorCategory::OutsideLattice,
            Error::Format { .. } => ErrorCategory::Format,
            Error::Io { .. } => ErrorCategory::Io,
            Error::CheckFailed(_) => ErrorCategory::CheckFailed,
            Error::Context { source, .. } => source.category(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::ConfigInvalid(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches module/operation provenance to an error.
pub trait Provenance<T> {
    fn within(self, module: &'static str, operation: &'static str) -> Result<T>;
}

impl<T> Provenance<T> for Result<T> {
    fn within(self, module: &'static str, operation: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            ctx @ Error::Context { .. } => ctx,
            other => Error::Context {
                module,
                operation,
                source: Box::new(other),
            },
        })
    }
}
