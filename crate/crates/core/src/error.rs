use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// The variants line up with the CLI's exit-code classes: configuration
/// problems, missing or malformed inputs, and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) | Error::Degenerate(_) => "input",
            Error::Missing(_) => "missing",
            Error::NonFiniteActivation { .. } | Error::NonFiniteLoss { .. } => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) | Error::Csv(_) | Error::Image(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
