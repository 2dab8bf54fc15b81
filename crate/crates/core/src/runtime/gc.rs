//! Prefix garbage collection of a finished run.

use serde::{Deserialize, Serialize};

use crate::naming::{workflow_prefix, BranchStack, FunctionId};
use crate::shim::{DataStore, DsKind, DsSpec, ShimError};

use super::envelope::Envelope;
use super::wrapper::Ctx;
use super::{CrashPoint, Host, Registry, RuntimeConfig, RuntimeError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GcReport {
    pub platform: String,
    pub deleted_table: usize,
    pub deleted_object: usize,
}

/// Meter identity of the GC function of `platform` for one run.
pub fn gc_function_id(workflow_id: &str, platform: &str) -> FunctionId {
    FunctionId {
        workflow_id: workflow_id.to_string(),
        name: format!("gc.{platform}"),
        step: 0,
        branch: BranchStack::new(),
    }
}

/// Deletes every key of the run from the stores of the executing platform.
/// Idempotent; collaboration keys are not prefixed and survive.
pub async fn run_gc<H: Host>(host: &H, cfg: &RuntimeConfig, env: &Envelope) -> Result<GcReport, RuntimeError> {
    env.validate()?;
    let reg = Registry::new();
    let ctx = Ctx::new(host, cfg, &reg);
    let wid = &env.control.workflow_id;
    let id = gc_function_id(wid, host.platform());
    host.bind(&id);
    host.sleep(cfg.gc_grace_ticks).await;
    let prefix = workflow_prefix(wid);
    let mut doomed = Vec::new();
    for kind in [DsKind::Table, DsKind::Object] {
        let ds = match ctx.ds(&DsSpec::new(host.platform(), kind)).await {
            Ok(ds) => ds,
            Err(RuntimeError::Shim(ShimError::NoSuchStore(_))) => continue,
            Err(e) => return Err(e),
        };
        for key in ds.list_keys(&prefix).await? {
            doomed.push((kind, ds.clone(), key));
        }
    }
    let mut report = GcReport {
        platform: host.platform().to_string(),
        ..GcReport::default()
    };
    let half = doomed.len() / 2;
    for (i, (kind, ds, key)) in doomed.iter().enumerate() {
        if i == half && host.should_crash(&id, CrashPoint::GcMidSweep) {
            return Err(RuntimeError::Crashed(CrashPoint::GcMidSweep));
        }
        if ds.delete(key).await? {
            match kind {
                DsKind::Table => report.deleted_table += 1,
                DsKind::Object => report.deleted_object += 1,
            }
        }
    }
    if doomed.is_empty() && host.should_crash(&id, CrashPoint::GcMidSweep) {
        return Err(RuntimeError::Crashed(CrashPoint::GcMidSweep));
    }
    Ok(report)
}
