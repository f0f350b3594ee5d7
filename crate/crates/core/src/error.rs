use alloc::string::String;

use thiserror::Error;

use crate::semantics::ClassId;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("line {line}: expected {expected} vector components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("class `{0}` has a zero-norm embedding")]
    DegenerateEmbedding(String),

    #[error("meta-class coverage: {0}")]
    Coverage(String),

    #[error("seen and unseen label sets overlap on `{0}`")]
    Disjointness(String),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("cannot normalize scores of a zero feature vector")]
    ZeroFeature,

    #[error("class {0} cannot be a training target")]
    InvalidTarget(ClassId),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient at sample {index}")]
    NumericFailure { index: usize },

    #[error("report: {0}")]
    Report(String),

    #[error("empty class statistics")]
    EmptyStats,
}
