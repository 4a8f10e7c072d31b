use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numeric overflow in {location}")]
    NumericOverflow { location: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("state error: {0}")]
    State(String),
    #[error(
        "partition infeasible after {attempts} attempts (smallest shard achieved: {smallest})"
    )]
    PartitionInfeasible { attempts: usize, smallest: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn overflow(location: impl Into<String>) -> Self {
        Error::NumericOverflow {
            location: location.into(),
        }
    }
}
