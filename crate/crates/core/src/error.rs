use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("eigenvalue iteration failed to converge for a {0}x{0} matrix")]
    NoConvergence(usize),

    #[error("matrix dimension {dim} exceeds the configured cap {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("quadrature did not settle below tolerance after {nodes} nodes")]
    QuadratureDiverged { nodes: usize },

    #[error("invalid interval [{a}, {b}]")]
    InvalidInterval { a: f64, b: f64 },

    /// Malformed document, with the position reported by the JSON reader.
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },

    /// Well-formed document whose content violates a model invariant.
    #[error("invalid model at `{path}`: {message}")]
    Invalid { path: String, message: String },

    #[error("assumption (A1) unsatisfied: {0}")]
    AssumptionA1(String),

    #[error("unsupported for this system class: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid { path: path.into(), message: message.into() }
    }
}
