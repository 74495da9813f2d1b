use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state matrix is not Hurwitz (max real eigenvalue part {max_real:.6e})")]
    NotHurwitz { max_real: f64 },
    #[error("discretization failed: {0}")]
    Discretization(String),
    #[error("singular matrix: {0}")]
    Singularity(String),
    #[error("non-finite value in {0}")]
    Numerical(String),
    #[error("selection out of range: {0}")]
    Selection(String),
    #[error("no decision pending for the current step")]
    DecisionPending,
    #[error("action is not in the admissible set (distance {distance:.3e})")]
    NotAdmissible { distance: f64 },
    #[error("optimizer did not converge after {iterations} iterations")]
    Optimization { iterations: usize },
    #[error("decision is not interior to the admissible set")]
    Interiority,
    #[error("hyperplane stack has rank {rank}, need {needed}")]
    Rank { rank: usize, needed: usize },
    #[error("nominal action coincides with the optimum estimate")]
    DegenerateDirection,
    #[error("expansion direction has no DC effect; gamma capped at {cap}")]
    UnboundedGamma { cap: f64 },
    #[error("closed loop diverged at step {step} (state norm {norm:.3e})")]
    Instability { step: usize, norm: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
