//! Library side of the `glandseg` binary: config parsing and the
//! `synth`, `train`, `predict` and `evaluate` workflows.

pub mod commands;
pub mod config;
mod lock;

pub use commands::{cmd_evaluate, cmd_predict, cmd_synth, cmd_train, PredictionFiles};
pub use config::RunConfig;
pub use lock::OutputLock;

use glandseg_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, missing or malformed input: exit code 2.
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Core(
                CoreError::NoSamples(_)
                | CoreError::MissingAnnotation { .. }
                | CoreError::SizeMismatch { .. }
                | CoreError::Config(_)
                | CoreError::Manifest(_)
                | CoreError::Checkpoint(_)
                | CoreError::Image { .. },
            ) => 2,
            Self::Core(_) | Self::Io { .. } => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}
