use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure of the sparse direct factorization or of its residual check.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message} (pivot: {pivot:?}, relative residual: {residual:e})")]
pub struct SolverError {
    pub message: String,
    /// Elimination step at which no usable pivot was found, when known.
    pub pivot: Option<usize>,
    pub residual: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid interval ({a}, {b})")]
    InvalidInterval { a: f64, b: f64 },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("side-condition matrix is singular (det = {det:e}); the J mapping is not a bijection")]
    SingularSideConditions { det: f64 },

    #[error("interface meshes do not match: {0}")]
    Match(String),

    #[error("matrix `{0}` is not symmetric positive definite")]
    NotSpd(String),

    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error(
        "fixed-point iteration failed to contract after {iterations} iterations \
         (contraction factor {contraction:.3e}, step-restriction ratio dt*(h^-2+h^-1) = {step_ratio:.3e})"
    )]
    Contraction {
        iterations: usize,
        contraction: f64,
        step_ratio: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("window {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_window(self, window: usize) -> Self {
        match self {
            e @ Error::Window { .. } => e,
            e => Error::Window {
                window,
                source: Box::new(e),
            },
        }
    }
}
