use thiserror::Error;

use crate::validate::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Each variant maps to a stable machine-readable code through
/// [`Error::code`], which the command line surfaces in its error JSON.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("delta = {delta} must exceed 1/(n+1) = {min} for n = {n} calibration samples")]
    DeltaTooSmall { delta: f64, n: usize, min: f64 },

    #[error("no grid value satisfies the calibration condition (best achieved value {best})")]
    Infeasible { best: f64 },

    #[error("truth mask has no positive cell")]
    EmptyTruth,

    #[error("loss matrix violates the nesting property ({} violation(s))", .0.violations.len())]
    NestingViolation(ValidationReport),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("only {accepted} of {requested} samples passed event filtering after {draws} draws")]
    FilterExhausted {
        requested: usize,
        accepted: usize,
        draws: usize,
    },

    #[error("grid [{grid_min}, {grid_max}] does not strictly cover scores [{score_min}, {score_max}]")]
    GridDoesNotCover {
        grid_min: f64,
        grid_max: f64,
        score_min: f64,
        score_max: f64,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: expected record kind {expected}, found {found}")]
    KindMismatch {
        line: usize,
        expected: String,
        found: String,
    },

    #[error("record {id}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "EMPTY_INPUT",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::DeltaTooSmall { .. } => "DELTA_TOO_SMALL",
            Error::Infeasible { .. } => "INFEASIBLE",
            Error::EmptyTruth => "EMPTY_TRUTH",
            Error::NestingViolation(_) => "NESTING_VIOLATION",
            Error::DegenerateData(_) => "DEGENERATE_DATA",
            Error::FilterExhausted { .. } => "FILTER_EXHAUSTED",
            Error::GridDoesNotCover { .. } => "GRID_DOES_NOT_COVER",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::KindMismatch { .. } => "KIND_MISMATCH",
            Error::InvalidRecord { .. } => "INVALID_RECORD",
            Error::Io(_) => "IO_ERROR",
            Error::Json(_) => "JSON_ERROR",
            Error::Csv(_) => "CSV_ERROR",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
