use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate mask: row {row} has no allowed position")]
    DegenerateMask { row: usize },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("prompt layout error: {0}")]
    Layout(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("batching error: {0}")]
    Batching(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined mean over empty position set {0}")]
    EmptySet(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
