use thiserror::Error;

/// Command failure, mapped onto a stable process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Missing files, malformed data or configuration. Exit 2.
    #[error("{0}")]
    Input(String),

    /// A trial produced a non-finite loss. Exit 3.
    #[error("training diverged in trial {trial} at epoch {epoch}: {msg}")]
    Diverged {
        trial: usize,
        epoch: usize,
        msg: String,
    },

    /// Artifacts do not belong together. Exit 4.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// A selector matched nothing. Exit 5.
    #[error("empty selection: {0}")]
    EmptySelection(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Diverged { .. } => 3,
            Self::Mismatch(_) => 4,
            Self::EmptySelection(_) => 5,
        }
    }
}

impl From<stagnn::Error> for CliError {
    fn from(e: stagnn::Error) -> Self {
        match e {
            stagnn::Error::Diverged { trial, epoch, msg } => Self::Diverged { trial, epoch, msg },
            other => Self::Input(other.to_string()),
        }
    }
}
