use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {field} {reason}")]
    InvalidScene { field: &'static str, reason: String },

    #[error("invalid machine config: {field} {reason}")]
    InvalidMachine { field: &'static str, reason: String },

    #[error("invalid threshold {0}: must be in 0..=33")]
    InvalidThreshold(u32),

    #[error("trace contains no data")]
    EmptyTrace,

    #[error("warp {warp_id} iteration {iteration} references more than one primitive but was asserted convergent")]
    NonConvergentWarp { warp_id: u32, iteration: u32 },

    #[error("warp {warp_id} is scheduled on sm {sm} sub-core {subcore}, outside the machine ({num_sms} SMs x {subcores} sub-cores)")]
    ScheduleMismatch {
        warp_id: u32,
        sm: u32,
        subcore: u32,
        num_sms: u32,
        subcores: u32,
    },

    #[error("warp {0} has records but no schedule entry")]
    UnscheduledWarp(u32),

    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
