use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes across the pipeline. Stage wrappers attach the stage name so
/// a CLI report can say where a run died.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("direction vector is zero (or numerically zero)")]
    ZeroDirection,

    #[error("sample count must be even for symmetrization, got {0}; trim one row first")]
    OddSampleCount(usize),

    #[error("covariance is singular or rank-deficient: {0}")]
    SingularCovariance(String),

    #[error("random walk stalled: {0}")]
    WalkStuck(String),

    #[error("bisection did not converge: {0}")]
    NonConvergence(String),

    #[error("damping with radius {r} rejected every sample")]
    ZeroAcceptance { r: f64 },

    #[error("damping radius schedule exhausted: {0}")]
    ScheduleExhausted(String),

    #[error("probe direction too large: |phi| = {phi_abs:.4} is below the floor {floor}")]
    ProbeTooLarge { phi_abs: f64, floor: f64 },

    #[error("eigenvalue gaps stayed degenerate after {retries} probe retries")]
    SpectralDegeneracy { retries: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    /// Short machine-readable tag for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroDirection => "zero_direction",
            Error::OddSampleCount(_) => "odd_sample_count",
            Error::SingularCovariance(_) => "singular_covariance",
            Error::WalkStuck(_) => "walk_stuck",
            Error::NonConvergence(_) => "non_convergence",
            Error::ZeroAcceptance { .. } => "zero_acceptance",
            Error::ScheduleExhausted(_) => "schedule_exhausted",
            Error::ProbeTooLarge { .. } => "probe_too_large",
            Error::SpectralDegeneracy { .. } => "spectral_degeneracy",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }

    /// Stage tag if this error was wrapped by a pipeline stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
