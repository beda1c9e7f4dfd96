use std::io;

use thiserror::Error;

/// Errors raised anywhere in the ingestion, fitting and scoring pipeline.
#[derive(Debug, Error)]
pub enum BirdError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid Dirichlet parameters: {0}")]
    InvalidParams(String),
    #[error("invalid simplex point: {0}")]
    InvalidSimplex(String),
    #[error("Dirichlet density diverges at coordinate {index}: p = 0 with concentration {concentration} < 1")]
    DensityDiverges { index: usize, concentration: f64 },
    #[error("no user has two or more ratings; the temporal model is inapplicable")]
    NoTemporalData,
    #[error("every time gap is {gap}s; temporal bucketing is degenerate")]
    DegenerateTemporal { gap: u64 },
    #[error("invalid bucketing config: {0}")]
    InvalidBucketing(String),
    #[error("bucket {bucket} contains no whole-second gap")]
    UnreachableBucket { bucket: usize },
    #[error("{rejected} of {rows} rows are malformed (limit is 1%)")]
    TooManyMalformed { rejected: usize, rows: usize },
    #[error("cannot fit {k} clusters to {users} users")]
    TooManyClusters { k: usize, users: usize },
    #[error("all {samples} posterior samples had zero mixture density")]
    AllSamplesExcluded { samples: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

impl BirdError {
    pub fn category(&self) -> ErrorCategory {
        use BirdError::*;
        match self {
            InvalidArgument(_) | TooManyClusters { .. } => ErrorCategory::Usage,
            DimensionMismatch { .. }
            | NoTemporalData
            | TooManyMalformed { .. }
            | InvalidSpec(_)
            | InvalidBucketing(_)
            | Io(_)
            | Json(_)
            | Csv(_) => ErrorCategory::Data,
            InvalidParams(_)
            | InvalidSimplex(_)
            | DensityDiverges { .. }
            | DegenerateTemporal { .. }
            | UnreachableBucket { .. }
            | AllSamplesExcluded { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, BirdError>;
