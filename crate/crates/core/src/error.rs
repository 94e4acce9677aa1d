use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid boundary configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("invalid step control: {0}")]
    InvalidControl(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("singular lattice operator: {0}")]
    Singular(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid driving path: {0}")]
    InvalidPath(String),
}

pub type Result<T> = std::result::Result<T, Error>;
