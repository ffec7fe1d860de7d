use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmpError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("run diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("oracle failure: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, AmpError>;

impl AmpError {
    pub fn config(msg: impl Into<String>) -> Self {
        AmpError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        AmpError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        AmpError::Numerical(msg.into())
    }
}
