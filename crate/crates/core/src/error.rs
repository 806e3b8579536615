use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants line up with the CLI exit codes: `Config` and `Contract`
/// map to 2, `Io`/`Format`/`Load` to 3, `NonFinite` to 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("load error for tensor `{name}`: {msg}")]
    Load { name: String, msg: String },

    #[error("non-finite value at iteration {iter} in {tensor}")]
    NonFinite { iter: u64, tensor: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
