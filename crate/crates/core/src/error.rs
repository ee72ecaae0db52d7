use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    /// The field cannot supply what the caller asked for (e.g. a second
    /// total derivative from a distilled head).
    #[error("capability error: {0}")]
    Capability(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// The NFE budget cannot be met by the method (reported as N/A).
    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("state error: {0}")]
    State(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
