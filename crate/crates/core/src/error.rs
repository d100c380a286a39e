use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("eigen solver did not converge")]
    ConvergenceFailure,

    #[error("no eigenvalue passed the truncation threshold")]
    EmptyBasis,

    #[error("second derivatives of a non-affine prediction are missing")]
    MissingSecondDerivatives,

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("point ({x}, {y}) lies outside the mesh")]
    PointOutsideMesh { x: f64, y: f64 },

    #[error("state became non-positive at step {step}")]
    NonPositiveState { step: usize },

    #[error("refinement diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        history: Vec<f64>,
    },

    #[error("prior variance of coefficient {index} is zero")]
    SingularPrior { index: usize },

    #[error("likelihood weights are degenerate")]
    DegenerateWeights,

    #[error("tensor grid with {dim} dimensions exceeds the cost guard")]
    CostGuard { dim: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            found,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
