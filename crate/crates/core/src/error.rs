use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax slice {slice} has every position masked")]
    DegenerateSlice { slice: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lookup of id {id} outside table of {rows} rows")]
    Lookup { id: usize, rows: usize },

    #[error("objective evaluated to a non-finite value ({value}) at coordinate {coord}")]
    Evaluation { coord: usize, value: f64 },

    #[error("non-finite gradient in parameter `{path}`")]
    NonFiniteGradient { path: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
