use thiserror::Error;

use crate::linprog::LpStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("lp dimension mismatch: {0}")]
    LpDimension(String),

    #[error("lp solve ended with status {status:?} while {context}")]
    Solver { status: LpStatus, context: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("joint state space has {size} states, limit is {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("policy error: {0}")]
    Policy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
