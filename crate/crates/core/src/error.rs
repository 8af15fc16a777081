use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Image-level logits with (near) zero norm; patch mining is meaningless.
    #[error("degenerate logits: norm {0:e} below 1e-12")]
    DegenerateLogits(f64),

    #[error("training diverged: {term} is not finite")]
    Diverged { term: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),
}

impl Error {
    /// Short stable tag used in single-line CLI diagnostics and FFI status mapping.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::UnknownKey(_) => "unknown_key",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateLogits(_) => "degenerate_logits",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
            Error::Dataset(_) => "dataset",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
