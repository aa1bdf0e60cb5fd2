use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the library. The CLI maps `Identity` to its own exit
/// code; everything else is an input/configuration failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("span error: {0}")]
    Span(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("identity error: frozen-model digest mismatch (expected {expected:016x}, found {found:016x})")]
    Identity { expected: u64, found: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
