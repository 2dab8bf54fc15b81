//! The function-side wrapper.
//!
//! Every deployed function runs [`wrapper::handle`] around its user code. The
//! wrapper recomputes the instance id from the envelope, makes data
//! production at-most-once through the output checkpoint, makes successor
//! invocation at-most-once through the invocation list, and relies on the
//! platform's at-least-once delivery for the rest.

#![allow(async_fn_in_trait)]

pub mod coordination;
pub mod envelope;
pub mod gc;
pub mod placement;
pub mod state;
pub mod wrapper;

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::naming::FunctionId;
use crate::shim::{Backend, ShimError};

pub use envelope::{Control, Data, DataRef, Envelope, Meta};
pub use state::{unwrap, ExecOutcome, WorkflowState};
pub use wrapper::{choose_transfer, handle, Transfer};

/// How a fan-in participant decides it is the one to trigger the aggregator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coordination {
    /// Trigger iff this participant's own update completed the bitmap.
    #[default]
    Atomic,
    /// Trigger iff a read after the update sees all bits set. Several
    /// participants may trigger; downstream checkpoints absorb duplicates.
    ReadAfterWrite,
}

/// Deliberate protocol defects used to check that the oracle catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolMutation {
    SkipInvocationAppend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RuntimeConfig {
    pub coordination: Coordination,
    pub envelope_allowance_bytes: u64,
    pub group_size: usize,
    /// Overrides every platform's retry budget when set.
    pub retry_budget: Option<u32>,
    /// Ticks a GC function waits before sweeping, so trailing duplicate
    /// executions of the run finish first.
    pub gc_grace_ticks: u64,
    pub mutation: Option<ProtocolMutation>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            coordination: Coordination::Atomic,
            envelope_allowance_bytes: 4096,
            group_size: 10,
            retry_budget: None,
            gc_grace_ticks: 64,
            mutation: None,
        }
    }
}

/// Protocol locations where a fault plan may kill the running handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CrashPoint {
    BeforeOutputCkpt,
    AfterOutputBeforeInvoke,
    /// After the first half of invocation group `k` (1-based).
    MidInvokeBatch(u32),
    AfterInvokeBeforeIvkAppend,
    GcMidSweep,
}

impl CrashPoint {
    /// The four points every function passes through.
    pub const PROTOCOL: [CrashPoint; 4] = [
        CrashPoint::BeforeOutputCkpt,
        CrashPoint::AfterOutputBeforeInvoke,
        CrashPoint::MidInvokeBatch(1),
        CrashPoint::AfterInvokeBeforeIvkAppend,
    ];
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrashPoint::BeforeOutputCkpt => f.write_str("before-output-ckpt"),
            CrashPoint::AfterOutputBeforeInvoke => f.write_str("after-output-before-invoke"),
            CrashPoint::MidInvokeBatch(k) => write!(f, "mid-invoke-batch({k})"),
            CrashPoint::AfterInvokeBeforeIvkAppend => f.write_str("after-invoke-before-ivk-append"),
            CrashPoint::GcMidSweep => f.write_str("gc-mid-sweep"),
        }
    }
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "before-output-ckpt" => CrashPoint::BeforeOutputCkpt,
            "after-output-before-invoke" => CrashPoint::AfterOutputBeforeInvoke,
            "after-invoke-before-ivk-append" => CrashPoint::AfterInvokeBeforeIvkAppend,
            "gc-mid-sweep" => CrashPoint::GcMidSweep,
            _ => {
                let k = s
                    .strip_prefix("mid-invoke-batch(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse::<u32>().ok())
                    .filter(|k| *k >= 1)
                    .ok_or_else(|| format!("unknown crash point `{s}`"))?;
                CrashPoint::MidInvokeBatch(k)
            }
        })
    }
}

impl Serialize for CrashPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CrashPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Shim(#[from] ShimError),
    #[error(transparent)]
    Envelope(#[from] envelope::EnvelopeError),
    #[error("upstream checkpoint `{0}` is missing")]
    MissingUpstreamCheckpoint(String),
    #[error("user function failed: {0}")]
    UserFunction(String),
    #[error("injected crash at {0}")]
    Crashed(CrashPoint),
    #[error("no platform accepted the invocation of `{0}`")]
    AllPlatformsFailed(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("protocol invariant broken: {0}")]
    InvariantBreach(String),
}

/// Side observations reported to the hosting environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuntimeEvent {
    /// User code ran for this instance (possibly again).
    UserExec(FunctionId),
    /// A terminal handler finished; the run is complete.
    Completed { workflow_id: String },
    /// A GC trigger could not be delivered.
    GcTriggerFailed { workflow_id: String, platform: String },
}

/// Environment a handler runs in: the backend, the executing platform, and
/// hooks for fault injection and metering attribution.
pub trait Host {
    type B: Backend;

    fn backend(&self) -> &Self::B;

    /// Platform executing this handler (a backup platform after failover).
    fn platform(&self) -> &str;

    /// Attributes subsequent backend calls of this handler to `id`.
    fn bind(&self, id: &FunctionId);

    /// Whether the handler must crash at `point`.
    fn should_crash(&self, id: &FunctionId, point: CrashPoint) -> bool;

    fn record(&self, event: RuntimeEvent);

    async fn sleep(&self, ticks: u64);
}

/// Context handed to user code.
#[derive(Debug, Clone)]
pub struct FnContext {
    pub id: FunctionId,
    pub output_key: String,
    /// True when an output already exists under `output_key`. User code that
    /// uploads its own output must not overwrite it: the first writer wins.
    pub is_stored: bool,
    pub iteration: u32,
}

pub type UserFn = Rc<dyn Fn(&FnContext, &[Vec<u8>]) -> Result<Vec<u8>, String>>;
pub type Predicate = Rc<dyn Fn(&[u8]) -> bool>;

/// User functions and choice predicates by name. Unregistered functions echo
/// their input (inputs concatenated for multi-input functions).
#[derive(Clone, Default)]
pub struct Registry {
    functions: BTreeMap<String, UserFn>,
    predicates: BTreeMap<String, Predicate>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn function(
        mut self,
        name: &str,
        f: impl Fn(&FnContext, &[Vec<u8>]) -> Result<Vec<u8>, String> + 'static,
    ) -> Self {
        self.functions.insert(name.to_string(), Rc::new(f));
        self
    }

    pub fn predicate(mut self, name: &str, p: impl Fn(&[u8]) -> bool + 'static) -> Self {
        self.predicates.insert(name.to_string(), Rc::new(p));
        self
    }

    pub fn call(&self, name: &str, ctx: &FnContext, inputs: &[Vec<u8>]) -> Result<Vec<u8>, String> {
        match self.functions.get(name) {
            Some(f) => f(ctx, inputs),
            None => Ok(inputs.concat()),
        }
    }

    pub fn eval(&self, predicate: &str, output: &[u8]) -> Result<bool, RuntimeError> {
        self.predicates
            .get(predicate)
            .map(|p| p(output))
            .ok_or_else(|| RuntimeError::UnknownPredicate(predicate.to_string()))
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("functions", &self.functions.keys().collect::<Vec<_>>())
            .field("predicates", &self.predicates.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_points_round_trip_as_strings() {
        for p in CrashPoint::PROTOCOL
            .into_iter()
            .chain([CrashPoint::GcMidSweep, CrashPoint::MidInvokeBatch(3)])
        {
            assert_eq!(p.to_string().parse::<CrashPoint>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<CrashPoint>(&json).unwrap(), p);
        }
        assert!("mid-invoke-batch(0)".parse::<CrashPoint>().is_err());
        assert!("explode".parse::<CrashPoint>().is_err());
    }

    #[test]
    fn config_defaults_and_keys() {
        let cfg: RuntimeConfig = serde_json::from_str(r#"{"coordination":"read-after-write","groupSize":5}"#).unwrap();
        assert_eq!(cfg.coordination, Coordination::ReadAfterWrite);
        assert_eq!(cfg.group_size, 5);
        assert_eq!(cfg.envelope_allowance_bytes, 4096);
        assert_eq!(RuntimeConfig::default().group_size, 10);
    }
}
