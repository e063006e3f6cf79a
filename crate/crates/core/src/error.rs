use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Resource that limits a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingConstraint {
    Memory,
    Compute,
    Bandwidth,
    None,
}

impl fmt::Display for BindingConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BindingConstraint::Memory => "memory",
            BindingConstraint::Compute => "compute",
            BindingConstraint::Bandwidth => "bandwidth",
            BindingConstraint::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error("profile for device `{device}` has no `{stage}` entries")]
    MissingStage { device: String, stage: String },

    #[error("no unit price for device `{0}`")]
    MissingPrice(String),

    #[error("infeasible ({constraint}): {detail}")]
    Infeasible {
        constraint: BindingConstraint,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn infeasible(constraint: BindingConstraint, detail: impl Into<String>) -> Self {
        Error::Infeasible {
            constraint,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
