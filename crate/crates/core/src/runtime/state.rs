//! Reconstructing the per-instance state from an envelope.

use std::cell::RefCell;
use std::rc::Rc;

use crate::ir::SubGraph;
use crate::naming::{compute_function_id, derive_keys, FunctionId, KeySet};
use crate::shim::{Backend, DsSpec, StoredValue};

use super::envelope::{Data, Envelope};
use super::{Host, RuntimeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowState {
    pub workflow_id: String,
    pub step: u32,
    pub branch: crate::naming::BranchStack,
    pub iteration: u32,
    pub session: String,
    /// Always `compute_function_id(workflowId, self.name, step, branch)`.
    pub id: FunctionId,
    pub keys: KeySet,
    pub sub_graph: SubGraph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub output: Vec<u8>,
    /// The output is durably checkpointed and equals the stored value.
    pub is_stored: bool,
    /// User code was skipped because a checkpoint already existed.
    pub from_checkpoint: bool,
    /// Store that holds the checkpoint.
    pub location: DsSpec,
}

/// Datastore handles opened by one handler, created on first use.
pub struct Stores<B: Backend> {
    open: RefCell<Vec<(DsSpec, Rc<B::Ds>)>>,
}

impl<B: Backend> Default for Stores<B> {
    fn default() -> Self {
        Self {
            open: RefCell::new(Vec::new()),
        }
    }
}

impl<B: Backend> Stores<B> {
    pub async fn get(&self, backend: &B, spec: &DsSpec) -> Result<Rc<B::Ds>, RuntimeError> {
        if let Some((_, ds)) = self.open.borrow().iter().find(|(s, _)| s == spec) {
            return Ok(ds.clone());
        }
        let ds = Rc::new(backend.ds_create(spec).await?);
        self.open.borrow_mut().push((spec.clone(), ds.clone()));
        Ok(ds)
    }
}

/// Recomputes the instance id and fetches the input: the direct payload, or
/// one value per indirect reference.
pub async fn unwrap<H: Host>(
    host: &H,
    stores: &Stores<H::B>,
    env: &Envelope,
    sg: &SubGraph,
) -> Result<(Vec<Vec<u8>>, WorkflowState), RuntimeError> {
    use crate::shim::DataStore;
    env.validate()?;
    let c = &env.control;
    let id = compute_function_id(&c.workflow_id, &sg.this.name, c.step, &c.branch);
    host.bind(&id);
    let inputs = match &env.data {
        Data::Direct { payload } => vec![payload.clone()],
        Data::Indirect { refs } => {
            let mut out = Vec::with_capacity(refs.len());
            for r in refs {
                let ds = stores.get(host.backend(), &r.ds).await?;
                match ds.get_value(&r.key).await? {
                    Some(StoredValue::Item(bytes)) => out.push(bytes),
                    _ => return Err(RuntimeError::MissingUpstreamCheckpoint(r.key.clone())),
                }
            }
            out
        }
    };
    let state = WorkflowState {
        workflow_id: c.workflow_id.clone(),
        step: c.step,
        branch: c.branch.clone(),
        iteration: env.meta.iteration,
        session: c.session.clone(),
        keys: derive_keys(&id),
        id,
        sub_graph: sg.clone(),
    };
    Ok((inputs, state))
}
