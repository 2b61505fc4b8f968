use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes that cannot be combined.
    Dimension(String),
    /// Input data outside its valid domain (class ids, token ids, pixel values).
    Data(String),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl core::error::Error for Error {}
