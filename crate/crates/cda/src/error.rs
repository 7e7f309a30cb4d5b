use std::path::PathBuf;

/// Failure of a `cda` operation, grouped by what the user has to fix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit code per error category.
impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Io { .. } => 6,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

impl From<cda_core::Error> for Error {
    fn from(e: cda_core::Error) -> Self {
        use cda_core::Error as E;
        match e {
            E::NonFiniteLoss(_) | E::NonFinite { .. } | E::MissingGradient(_) => Error::Numeric(e.to_string()),
            E::InvalidArgument { .. } | E::Unknown { .. } => Error::Config(e.to_string()),
            E::BadMagic(_) | E::Truncated { .. } | E::DimensionOverflow | E::Data(_) => Error::Data(e.to_string()),
            E::Shape { .. } | E::InvalidTensor(_) | E::NonScalarLoss(_) => Error::Numeric(e.to_string()),
        }
    }
}
