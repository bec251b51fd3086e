use std::path::PathBuf;

/// Error type shared across the toolkit.
///
/// Variants follow the failure classes the pipeline distinguishes when it
/// maps errors to process exit codes: bad data or configuration, numeric
/// failures during training, and artifact (weight file) mismatches.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not conform; the message carries both shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data is missing, empty, or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A model configuration cannot be built.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A lookup by id (layer, class) failed.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A serialized artifact (weight file, manifest) is malformed or
    /// inconsistent with the model it is loaded into.
    #[error("format error: {0}")]
    Format(String),

    /// A non-finite value was produced where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
