use std::fmt;

use crate::solver::LowRankEstimate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which OLS family a singular Gram matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignAxis {
    /// Per-period regression on loadings (index is a period).
    Period,
    /// Per-unit regression on factors (index is a unit).
    Unit,
}

impl fmt::Display for DesignAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignAxis::Period => f.write_str("period"),
            DesignAxis::Unit => f.write_str("unit"),
        }
    }
}

/// Broad class of a failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row {row} has no observed entries")]
    EmptyRow { row: usize },
    #[error("column {col} has no observed entries")]
    EmptyColumn { col: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("mask entry ({row}, {col}) is not 0 or 1")]
    InvalidMask { row: usize, col: usize },
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("invalid option: {0}")]
    InvalidOptions(String),
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("solver did not converge within {} iterations", .estimate.objective_trace.len().saturating_sub(1))]
    DidNotConverge { estimate: Box<LowRankEstimate> },
    #[error("requested rank {requested} exceeds numerical rank {available}")]
    RankDeficient { requested: usize, available: usize },
    #[error("singular design matrix for {axis} {index}")]
    SingularDesign { axis: DesignAxis, index: usize },
    #[error("sample splitting needs at least {required} periods, got {periods}")]
    TooFewPeriods { periods: usize, required: usize },
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("every rank candidate failed to fit")]
    AllCandidatesFailed,
    #[error("value {value} at position {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("{failed} of {reps} replications failed")]
    McUnstable { failed: usize, reps: usize },
    #[error("arm {arm}: {source}")]
    Arm { arm: u8, source: Box<Error> },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate cell (unit {unit}, time {time})")]
    DuplicateCell { unit: String, time: String },
    #[error("no row for cell (unit {unit}, time {time}); treatment panels must be complete")]
    MissingCell { unit: String, time: String },
    #[error("line {line}: value missing while treatment indicator present")]
    MixedTreatmentSchema { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidOptions(_) | Error::InvalidGroup(_) => ErrorKind::Usage,
            Error::EmptyRow { .. }
            | Error::EmptyColumn { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidMask { .. }
            | Error::OutOfRange { .. }
            | Error::TooFewPeriods { .. }
            | Error::Parse { .. }
            | Error::DuplicateCell { .. }
            | Error::MissingCell { .. }
            | Error::MixedTreatmentSchema { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::NonFinite
            | Error::DidNotConverge { .. }
            | Error::RankDeficient { .. }
            | Error::SingularDesign { .. }
            | Error::ZeroMatrix
            | Error::AllCandidatesFailed
            | Error::McUnstable { .. } => ErrorKind::Numerical,
            Error::Arm { source, .. } => source.kind(),
        }
    }

    /// Variant name, for messages.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyRow { .. } => "EmptyRow",
            Error::EmptyColumn { .. } => "EmptyColumn",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidMask { .. } => "InvalidMask",
            Error::NonFinite => "NonFinite",
            Error::InvalidOptions(_) => "InvalidOptions",
            Error::InvalidGroup(_) => "InvalidGroup",
            Error::DidNotConverge { .. } => "DidNotConverge",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::SingularDesign { .. } => "SingularDesign",
            Error::TooFewPeriods { .. } => "TooFewPeriods",
            Error::ZeroMatrix => "ZeroMatrix",
            Error::AllCandidatesFailed => "AllCandidatesFailed",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::McUnstable { .. } => "McUnstable",
            Error::Arm { source, .. } => source.name(),
            Error::Parse { .. } => "ParseError",
            Error::DuplicateCell { .. } => "DuplicateCell",
            Error::MissingCell { .. } => "MissingCell",
            Error::MixedTreatmentSchema { .. } => "MixedTreatmentSchema",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn in_arm(self, arm: u8) -> Error {
        Error::Arm {
            arm,
            source: Box::new(self),
        }
    }
}
