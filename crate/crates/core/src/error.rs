use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside model domain: {reason}")]
    TimeDomain { t: f64, reason: &'static str },

    #[error("{operation} is not available for the {kind} model")]
    UnsupportedModel {
        kind: &'static str,
        operation: &'static str,
    },

    #[error("{operation} is not available for {kind} domains")]
    UnsupportedDomain {
        kind: &'static str,
        operation: &'static str,
    },

    #[error("point is not on the boundary (distance {distance:e})")]
    NotOnBoundary { distance: f64 },

    #[error("degenerate normal: gradient norm {norm:e}")]
    DegenerateNormal { norm: f64 },

    #[error("density {density:e} below underflow guard")]
    Underflow { density: f64 },

    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(u64),

    #[error("non-finite state after step to t = {t}")]
    NonFiniteState { t: f64 },

    #[error("simulation fault on path {path_index} at t = {t}: non-finite state")]
    SimulationFault { path_index: u64, t: f64 },

    #[error("{fault_count} path(s) faulted; first: {first}")]
    BatchFailed { fault_count: u64, first: Box<Error> },
}
