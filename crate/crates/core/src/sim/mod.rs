//! Deterministic simulated multi-cloud implementing the shim traits.

pub mod cloud;
pub mod exec;
pub mod history;
pub mod linearizability;
pub mod meter;
pub mod oracle;
pub mod store;
pub mod topology;

use thiserror::Error;

pub use cloud::{RunReport, RunState, SimCloud};
pub use meter::OpCounts;
pub use topology::{FaultPlan, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("platform `{0}` is unavailable")]
    PlatformUnavailable(String),
    #[error("event budget of {0} exceeded")]
    EventBudgetExceeded(u64),
    #[error("no workflow deployed")]
    NotDeployed,
}
