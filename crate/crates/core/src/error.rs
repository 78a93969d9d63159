use thiserror::Error;

use crate::scene::AgentId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("agent {0} has a non-finite state")]
    NonFiniteState(AgentId),
    #[error("non-finite origin")]
    NonFiniteOrigin,
    #[error("pivot {t} out of range: valid pivots are {lo}..={hi}")]
    PivotOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("degenerate heading vector (norm {0:e})")]
    DegenerateHeading(f64),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty group selection")]
    EmptySelection,
    #[error("no valid entries to evaluate: {0}")]
    EmptyBatch(&'static str),
    #[error("empty histogram for statistic `{0}`")]
    EmptyHistogram(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("loss diverged at step {step}")]
    Divergence { step: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
