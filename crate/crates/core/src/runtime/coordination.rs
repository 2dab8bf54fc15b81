//! Decentralized coordination: fan-in bitmaps and cross-workflow
//! collaboration lists.

use uuid::Uuid;

use crate::ir::{FanInSpec, InvokeMode};
use crate::naming::{compute_function_id, derive_keys, redundant_key, render_local, BranchStack, FunctionId};
use crate::shim::{DataStore, DsKind, DsSpec, ShimError, StoredValue};

use super::envelope::{Control, Data, DataRef, Envelope, Meta};
use super::state::{ExecOutcome, WorkflowState};
use super::wrapper::{Ctx, Invocation};
use super::{Coordination, Host, RuntimeError};

/// Namespace for workflow ids minted by batch windows.
pub const BATCH_NAMESPACE: Uuid = Uuid::from_u128(0x6a1f_3c2e_9b4d_4e8a_b5c7_d0e1_f2a3_b4c5);

#[derive(Debug, Clone)]
pub struct FanInOutcome {
    pub aggregator: FunctionId,
    /// Output references of every participant, in bitmap order.
    pub refs: Vec<DataRef>,
    /// This participant triggers the aggregator.
    pub closer: bool,
}

/// Marks this participant in the aggregator's bitmap. Costs 2W2R: create,
/// size check read, update, post-update read.
pub async fn coordinate_fan_in<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    spec: &FanInSpec,
) -> Result<FanInOutcome, RuntimeError> {
    let (group, index) = spec
        .locate(&st.sub_graph.this.name, st.step, &st.branch)
        .ok_or_else(|| RuntimeError::InvariantBreach(format!("{} is not a participant", st.id.local())))?;
    let size = group.participants.len();
    let aggregator = compute_function_id(
        &st.workflow_id,
        &spec.aggregator,
        group.aggregator_step,
        &group.aggregator_branch,
    );
    let key = derive_keys(&aggregator).bitmap_key;
    let ds = ctx.ds(&DsSpec::new(spec.placement.clone(), DsKind::Table)).await?;
    ds.create_bitmap(size, &key).await?;
    match ds.get_value(&key).await? {
        Some(StoredValue::Bitmap(b)) if b.bits.len() == size => {}
        Some(StoredValue::Bitmap(b)) => {
            return Err(RuntimeError::InvariantBreach(format!(
                "bitmap `{key}` has {} bits, expected {size}",
                b.bits.len()
            )))
        }
        None => return Err(ShimError::MissingBitmap(key).into()),
        Some(_) => return Err(ShimError::WrongType(key).into()),
    }
    let snapshot = ds.update_bitmap(index, &key).await?;
    let after = match ds.get_value(&key).await? {
        Some(StoredValue::Bitmap(b)) => b,
        None => return Err(ShimError::MissingBitmap(key).into()),
        Some(_) => return Err(ShimError::WrongType(key).into()),
    };
    let closer = match ctx.cfg.coordination {
        Coordination::Atomic => snapshot.completed_by == Some(index),
        Coordination::ReadAfterWrite => after.all_set(),
    };
    let data_ds = DsSpec::new(spec.placement.clone(), st.sub_graph.transfer.ds);
    let refs = group
        .participants
        .iter()
        .map(|p| DataRef {
            key: derive_keys(&compute_function_id(&st.workflow_id, &p.name, p.step, &p.branch)).output_key,
            ds: data_ds.clone(),
        })
        .collect();
    Ok(FanInOutcome {
        aggregator,
        refs,
        closer,
    })
}

#[derive(Debug, Clone)]
pub enum CollabOutcome {
    Invoke(Box<Invocation>),
    /// Contribution registered under this marker; someone else invokes.
    Recorded(String),
}

/// Batch and redundancy primitives. Both coordinate through a list in the
/// invoked function's platform table.
pub async fn coordinate_collab<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    outcome: &ExecOutcome,
) -> Result<CollabOutcome, RuntimeError> {
    let sg = &st.sub_graph;
    let target = sg
        .primitive_targets()
        .next()
        .ok_or_else(|| RuntimeError::InvariantBreach("collaboration without target".into()))?;
    let list_ds = ctx.ds(&DsSpec::new(target.platform.clone(), DsKind::Table)).await?;
    let own = st.id.local();
    let envelope = |workflow_id: String, step: u32, branch: BranchStack, data: Data| {
        Envelope::new(
            Control {
                workflow_id,
                step,
                branch,
                session: st.session.clone(),
                invoke_mode: sg.invoke.mode,
            },
            data,
            Meta {
                caller: Some(st.id.render()),
                iteration: 0,
            },
        )
    };
    match sg.invoke.mode {
        InvokeMode::ByRedundant => {
            let branch = st
                .branch
                .popped()
                .map_err(|e| RuntimeError::InvariantBreach(e.to_string()))?;
            let successor = compute_function_id(&st.workflow_id, &target.name, st.step + 1, &branch);
            let key = redundant_key(&successor);
            list_ds.create_invocation_list(&key).await?;
            let list = list_ds.append_and_get_list(&key, std::slice::from_ref(&own)).await?;
            if list.first() != Some(&own) {
                return Ok(CollabOutcome::Recorded(key));
            }
            let data = Data::Indirect {
                refs: vec![DataRef {
                    key: st.keys.output_key.clone(),
                    ds: outcome.location.clone(),
                }],
            };
            Ok(CollabOutcome::Invoke(Box::new(Invocation {
                function: target.name.clone(),
                target: target.clone(),
                envelope: envelope(st.workflow_id.clone(), st.step + 1, branch, data),
                fallback_ref: None,
            })))
        }
        InvokeMode::ByBatch => {
            let key = sg
                .invoke
                .params
                .collab_key
                .clone()
                .ok_or_else(|| RuntimeError::InvariantBreach("batch without coordination key".into()))?;
            let batch = sg.invoke.params.batch_size.unwrap_or(1).max(1) as usize;
            let item_ds_spec = DsSpec::new(target.platform.clone(), DsKind::Object);
            let item_ds = ctx.ds(&item_ds_spec).await?;
            let item_key = format!("{key}/{}", st.id.render());
            item_ds.store_output_data(&item_key, &outcome.output).await?;
            list_ds.create_invocation_list(&key).await?;
            let list = list_ds
                .append_and_get_list(&key, std::slice::from_ref(&item_key))
                .await?;
            let pos = list
                .iter()
                .position(|k| k == &item_key)
                .ok_or_else(|| RuntimeError::InvariantBreach("contribution missing from list".into()))?;
            if (pos + 1) % batch != 0 {
                return Ok(CollabOutcome::Recorded(item_key));
            }
            let window = pos / batch;
            let refs = list[pos + 1 - batch..=pos]
                .iter()
                .map(|k| DataRef {
                    key: k.clone(),
                    ds: item_ds_spec.clone(),
                })
                .collect();
            let workflow_id = Uuid::new_v5(&BATCH_NAMESPACE, format!("{key}#{window}").as_bytes()).to_string();
            Ok(CollabOutcome::Invoke(Box::new(Invocation {
                function: target.name.clone(),
                target: target.clone(),
                envelope: envelope(workflow_id, 0, BranchStack::new(), Data::Indirect { refs }),
                fallback_ref: None,
            })))
        }
        other => Err(RuntimeError::InvariantBreach(format!(
            "{other:?} is not a collaboration primitive ({})",
            render_local(&sg.this.name, st.step, &st.branch)
        ))),
    }
}
