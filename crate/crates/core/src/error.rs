use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, dimensions or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied value is out of its domain.
    #[error("input error: {0}")]
    Input(String),

    /// Neuron state or input became non-finite.
    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error at record {index}: {msg}")]
    Data { index: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
