use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mean field: {0}")]
    InvalidMeanField(String),

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("empty action window")]
    EmptyWindow,

    #[error("action by agent `{agent}` at t={timestep} has no label for dimension `{dimension}`")]
    MissingLabel {
        agent: String,
        timestep: usize,
        dimension: String,
    },

    #[error("unknown label `{label}` for {context}")]
    UnknownLabel { label: String, context: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("invalid generator spec: {0}")]
    Spec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("horizon error: {0}")]
    Horizon(String),

    #[error("event `{event}` has no empirical mean field at t={timestep}")]
    MissingGroundTruth { event: String, timestep: usize },

    #[error("dropout rate {0} outside [0, 1)")]
    Rate(f64),

    #[error("service error: {0}")]
    Service(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("enumeration error: {0}")]
    Enumeration(String),

    #[error("pool error: requested {requested} agents from a pool of {available}")]
    Pool { requested: usize, available: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
