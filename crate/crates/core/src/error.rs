use thiserror::Error;

use crate::types::DeviceId;

/// Errors produced anywhere in the scheduling pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid cluster spec: {0}")]
    InvalidCluster(String),
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error("invalid replica {index}: {reason}")]
    InvalidReplica { index: usize, reason: String },
    #[error("invalid deployment: {0}")]
    InvalidDeployment(String),
    #[error("invalid profile parameters: {0}")]
    InvalidProfile(String),
    #[error("replica {index} cannot host the model (memory check failed)")]
    InfeasibleReplica { index: usize },
    #[error("least common multiple of replica capacities overflows 64 bits")]
    Overflow,
    #[error("deployment has no replicas")]
    EmptyDeployment,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model does not fit on all {devices} devices of the cluster")]
    ModelTooLarge { devices: usize },
    #[error("cluster with {devices} devices exceeds the exhaustive-search guard of {limit}")]
    TooLarge { devices: usize, limit: usize },
    #[error("no feasible mutation found within the retry budget")]
    NoFeasibleMutation,
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("actual series for type {type_id} has zero mean")]
    DegenerateActuals { type_id: usize },
    #[error("bytes [{start}, {end}) have no source holder (target device {target})")]
    UnsourcedFragment {
        start: u64,
        end: u64,
        target: DeviceId,
    },
    #[error("headroom {0} outside [0, 0.5]")]
    InvalidHeadroom(f64),
    #[error("no strategy covers span {span}")]
    TimelineGap { span: u64 },
    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("no completed requests")]
    NoCompletions,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
