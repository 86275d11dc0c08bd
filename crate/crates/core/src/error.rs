use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A component could not be built from the requested parameters.
    #[error("invalid parameter `{param}`: {reason}")]
    Construction { param: &'static str, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The feasible set of a lower-level problem is empty.
    #[error("infeasible lower-level set: {0}")]
    Infeasible(String),

    #[error("iterates diverged (non-finite value) at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for divergence,
    /// 4 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Construction { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
