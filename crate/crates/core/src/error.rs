use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("improper density: smallest precision eigenvalue is {min_eigenvalue:e}")]
    ImproperDensity { min_eigenvalue: f64 },

    #[error("{context}: matrix is not positive definite")]
    NotPositiveDefinite { context: &'static str },

    #[error("matrix is irrecoverably singular (jitter reached {jitter:e})")]
    IrrecoverablySingular { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown case id `{0}`")]
    UnknownCase(String),

    #[error("degenerate tilt: effective sample size {ess:.2} below floor {floor:.2}")]
    DegenerateTilt { ess: f64, floor: f64 },

    #[error("all Monte Carlo weights vanished at phi = {phi:?}")]
    VanishingWeights { phi: Vec<f64> },

    #[error("global approximation still improper after rescaling deltas (smallest eigenvalue {min_eigenvalue:e})")]
    ImproperAggregate { min_eigenvalue: f64 },

    #[error("device {device} failed in round {round}: {source}")]
    DeviceFailure {
        device: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("device group `{0}` has no usable rows")]
    EmptyDevice(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerics rather than inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ImproperDensity { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::IrrecoverablySingular { .. }
            | Error::NonFinite(_)
            | Error::DegenerateTilt { .. }
            | Error::VanishingWeights { .. }
            | Error::ImproperAggregate { .. } => true,
            Error::DeviceFailure { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Process exit code: 3 for numerical failures, 1 for output I/O, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else if matches!(self, Error::Io { .. }) {
            1
        } else {
            2
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
