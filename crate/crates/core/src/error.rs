use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing column `{0}` in input header")]
    MissingColumn(String),

    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("unparseable value `{value}` at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-binary treatment value `{value}` at row {row}, column `{column}` (expected 0 or 1)")]
    NonBinaryTreatment {
        row: usize,
        column: String,
        value: String,
    },

    #[error("mismatched row counts: {what} has {got} rows, expected {expected}")]
    MismatchedRows {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("no treatment columns given (need K >= 1)")]
    NoTreatments,

    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),

    #[error("constant focal column: {0}")]
    ConstantFocal(String),

    #[error("singular design in nuisance regression for `{target}`")]
    SingularNuisance { target: String },

    #[error("cross-fitting fold {fold} has {size} observations (need >= 2)")]
    SmallFold { fold: usize, size: usize },

    #[error("invalid nuisance configuration: {0}")]
    InvalidNuisance(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "penalized normal equations are numerically singular (reciprocal condition estimate {rcond:.3e}); \
         column `{column}` is collinear with the preceding columns; try lambda > 0"
    )]
    Singular { column: String, rcond: f64 },

    #[error("invalid penalty {0}: lambda must be finite and nonnegative")]
    InvalidLambda(f64),

    #[error("n = {n} <= p = {p}: residual variance and covariance are unavailable")]
    InsufficientDof { n: usize, p: usize },

    #[error("focal column has zero second moment after residualization")]
    ZeroFocalMoment,

    #[error("no unit has sub-treatment `{0}` active")]
    NoTreatedUnits(String),

    #[error("invalid probability input: {0}")]
    InvalidProbability(String),

    #[error("invalid tuning configuration: {0}")]
    InvalidTuning(String),

    #[error("invalid simulation configuration: {0}")]
    InvalidSimulation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("too many degenerate simulation draws: {redraws} redraws over {reps} reps")]
    TooManyRedraws { redraws: usize, reps: usize },

    #[error("identity check failed: {0}")]
    IdentityViolation(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("invalid argument: {0}")]
    Usage(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
