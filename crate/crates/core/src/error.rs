use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix does not have full column rank")]
    RankDeficient,
    #[error("Q-transform is singular (alpha_perp' beta_perp not invertible)")]
    SingularQ,
    #[error("process is unstable (spectral radius {0:.6} >= 1)")]
    Unstable(f64),
    #[error("invalid rank {rank} (allowed range 0..={max})")]
    InvalidRank { rank: usize, max: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("sample too short: {0}")]
    TooShort(String),
    #[error("eigenvalue {0} outside [0, 1)")]
    EigenvalueOutOfRange(f64),
    #[error("eigenvalue gap {gap:.3e} below tolerance {tol:.3e}")]
    DegenerateSpectrum { gap: f64, tol: f64 },
    #[error("invalid number of discretization steps: {0}")]
    InvalidSteps(usize),
    #[error("bootstrap failed: only {ok} of {requested} replicates succeeded")]
    BootstrapFailed { ok: usize, requested: usize },
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Io(_) | Error::Csv(_))
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
