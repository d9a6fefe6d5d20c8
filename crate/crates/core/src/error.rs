use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A primitive or model operation received incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation required a scalar but got something else.
    #[error("{op} requires a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    /// A Gaussian was constructed or used with a non-positive variance.
    #[error("non-positive variance in {context}: {value}")]
    NonPositiveVariance { context: &'static str, value: f64 },

    /// A numeric input that must be finite was not.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Invalid argument outside shape problems (empty sample set, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Replay sampling asked for more transitions than an episode holds.
    #[error("episode {episode} has {len} transitions, need {requested}")]
    EpisodeTooShort {
        episode: u64,
        len: usize,
        requested: usize,
    },

    /// Checkpoint file could not be read, parsed, or did not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Every planner candidate diverged; the caller gets a zero action sequence.
    #[error("planning degraded: all candidates diverged")]
    PlanningDegraded,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
