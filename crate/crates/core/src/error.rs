//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller-facing contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary input (IDX files, checkpoints, dumps).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Bad experiment configuration.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    /// Reconstruction diverged.
    #[error(
        "non-finite loss at reconstruction step {step}: rec={l_rec} lambda={l_lambda} prior={l_prior}"
    )]
    NonFiniteLoss {
        step: usize,
        l_rec: f64,
        l_lambda: f64,
        l_prior: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub fn config(line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
