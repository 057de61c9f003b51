use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] hairproxy_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corrupt session store: {0}")]
    Corrupt(String),

    #[error("cannot bind `{addr}`: {reason}")]
    Bind { addr: String, reason: String },
}

impl Error {
    /// Bad configuration or address, as opposed to a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Bind { .. }) || matches!(self, Error::Core(e) if e.is_validation())
    }
}
