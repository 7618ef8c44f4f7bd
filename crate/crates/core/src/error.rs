use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric input or a violated precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Graph and instance disagree about the peer set.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("graph contains a directed cycle through node {node}")]
    CyclicGraph { node: usize },

    /// A size cap guarding an exponential or exhaustive routine was hit.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// The hierarchical construction cannot be built for this instance.
    #[error("infeasible construction: {0}")]
    InfeasibleConstruction(String),

    /// No strictly feasible point exists.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Structural(_)
            | Error::CyclicGraph { .. }
            | Error::Resource(_)
            | Error::Json(_) => 2,
            Error::InfeasibleConstruction(_) | Error::Infeasible(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
