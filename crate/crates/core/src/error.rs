use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the category the command line reports: shape and
/// argument problems, malformed data, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "infeasible alignment: {frames} frames cannot emit {labels} labels with {repeats} repeats"
    )]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("g2p error: unmappable characters {0:?}")]
    G2p(Vec<char>),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
