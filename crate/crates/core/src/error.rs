use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention row {0}")]
    EmptyAttentionRow(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid knobs: {0}")]
    Knobs(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },
    #[error("reserved gist token id {0} in context")]
    ReservedToken(usize),
    #[error("cache convention mismatch: {0}")]
    Convention(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
