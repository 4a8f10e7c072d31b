use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedsimError {
    #[error(transparent)]
    Core(#[from] fedsim_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The configuration does not satisfy the schema. `field` names the
    /// offending key when one can be singled out.
    #[error("config error{}: {message}", field.as_deref().map(|f| format!(" in field `{f}`")).unwrap_or_default())]
    Schema {
        field: Option<String>,
        message: String,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: fedsim_core::Error,
    },

    #[error("configs cannot be compared: {0}")]
    Mismatch(String),

    #[error("{0}")]
    Format(String),
}

impl FedsimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedsimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: &str, message: impl Into<String>) -> Self {
        FedsimError::Schema {
            field: Some(field.to_owned()),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 2 for bad input, 1 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            FedsimError::Schema { .. } | FedsimError::Mismatch(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = FedsimError> = std::result::Result<T, E>;
