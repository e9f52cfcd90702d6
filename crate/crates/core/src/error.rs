use thiserror::Error;

use crate::io::FormatError;
use crate::scene::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invariant violated: {0}")]
    Invalid(#[from] Violation),

    #[error("unknown template `{0}` (expected chain-K, star-K or pendulum)")]
    UnknownTemplate(String),

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("{what} = {value} is out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("candidates {0} and {1} share the same position")]
    DuplicateCandidate(usize, usize),

    #[error("time {t} outside field time bounds [0, {max}]")]
    TimeOutOfBounds { t: f64, max: f64 },

    #[error("term `{term}` needs target data missing at frame {frame}")]
    MissingTarget { term: String, frame: usize },

    #[error("objective has no data term (rec or chamfer)")]
    NoDataTerm,

    #[error("negative weight {weight} for term `{term}`")]
    NegativeWeight { term: String, weight: f64 },

    #[error("invalid fit configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("degenerate camera: {0}")]
    DegenerateCamera(&'static str),

    #[error("stage requires {0}")]
    MissingComponent(&'static str),

    #[error("png encoding failed: {0}")]
    Png(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
