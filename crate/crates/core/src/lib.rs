//! Function-side orchestration of serverless workflows across several FaaS
//! platforms, with exactly-once observable semantics.
//!
//! - [`ir`]: workflow description and per-function sub-graphs.
//! - [`naming`]: function identifiers and checkpoint keys.
//! - [`shim`]: the uniform datastore and FaaS interface.
//! - [`runtime`]: the wrapper executing the checkpoint protocol.
//! - [`sim`]: a deterministic simulated multi-cloud implementing the shim.
//! - [`harness`]: scenarios, the exactly-once oracle driver, and reports.

pub mod harness;
pub mod ir;
pub mod naming;
pub mod runtime;
pub mod shim;
pub mod sim;
