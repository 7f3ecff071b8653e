//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid geometry (degenerate triangle, inconsistent mesh, ...).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A point fell outside the triangulated domain.
    #[error("location ({x}, {y}) is outside the triangulated domain")]
    OutsideDomain { x: f64, y: f64 },

    /// Non-finite values or other numerical breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A linear system was singular or too ill-conditioned to solve.
    #[error("conditioning: {0}")]
    Conditioning(String),

    /// AR coefficients outside the stationary region.
    #[error("non-stationary AR coefficients: {0}")]
    NonStationary(String),

    /// The EM iteration produced non-finite objective values.
    #[error("fit diverged: {0}")]
    Divergence(String),

    /// Malformed or inconsistent input data.
    #[error("data: {0}")]
    Data(String),

    /// Text-format parse failure with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid run configuration.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line tools.
    ///
    /// 2 = configuration error, 3 = data error, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Geometry(_)
            | Error::OutsideDomain { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io(_) => 3,
            Error::Numeric(_)
            | Error::Conditioning(_)
            | Error::NonStationary(_)
            | Error::Divergence(_) => 4,
        }
    }
}
