use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{file}: row {row}: {message}")]
    Data {
        file: String,
        row: usize,
        message: String,
    },

    #[error("iteration {iteration}, {component}: {source}")]
    Sampler {
        iteration: usize,
        component: String,
        #[source]
        source: Box<SvrError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SvrError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SvrError {
    SvrError::InvalidArgument(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> SvrError {
    SvrError::Numerical(msg.into())
}
