//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor or model shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    /// An object was used before it reached the required state.
    #[error("invalid state: {0}")]
    State(String),

    /// Dataset directory has no manifest.
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    /// A trial file disagrees with the manifest.
    #[error("dataset format error in {file}: {message}")]
    DataFormat { file: String, message: String },

    /// Two samples share the same (subject, trial, epoch) key.
    #[error("duplicate sample key (subject={subject}, trial={trial}, epoch={epoch})")]
    DuplicateKey {
        subject: String,
        trial: String,
        epoch: usize,
    },

    /// A checkpoint or model file is corrupt or of the wrong kind.
    #[error("checkpoint error in {file}: {message}")]
    Checkpoint { file: String, message: String },

    /// A training loss became non-finite.
    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: String, step: usize },

    /// Flat key=value config problem.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
