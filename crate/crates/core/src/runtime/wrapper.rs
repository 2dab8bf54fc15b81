//! Wrap/Unwrap around user code: output checkpoint, successor planning,
//! invocation checkpoint with grouping, transfer choice and failover.

use std::cell::RefCell;
use std::rc::Rc;

use futures::future::join_all;

use crate::ir::{InvokeMode, NextFunctionInfo, SubGraph, GC_FUNCTION};
use crate::naming::{push_branch, render_local, BranchStack};
use crate::shim::{Backend, DataStore, DsKind, DsSpec, FaasClient, FaasSpec, ShimError, StoredValue, TABLE_ITEM_LIMIT};

use super::coordination::{coordinate_collab, coordinate_fan_in, CollabOutcome};
use super::envelope::{Control, Data, DataRef, Envelope, Meta};
use super::placement::checkpoint_store;
use super::state::{unwrap, ExecOutcome, Stores, WorkflowState};
use super::{CrashPoint, FnContext, Host, ProtocolMutation, Registry, RuntimeConfig, RuntimeError, RuntimeEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    Direct,
    Indirect,
}

/// Direct iff the payload plus the envelope allowance fits the target's
/// limit and the sub-graph does not force datastore transfer.
pub fn choose_transfer(payload_len: u64, limit: u64, transfer_by_ds: bool, allowance: u64) -> Transfer {
    if !transfer_by_ds && payload_len + allowance <= limit {
        Transfer::Direct
    } else {
        Transfer::Indirect
    }
}

/// Per-handler context: the host plus lazily created backend handles.
type SharedFaas<H> = Rc<<<H as Host>::B as Backend>::Faas>;

pub struct Ctx<'a, H: Host> {
    pub host: &'a H,
    pub cfg: &'a RuntimeConfig,
    pub reg: &'a Registry,
    pub stores: Stores<H::B>,
    clients: RefCell<Vec<(String, SharedFaas<H>)>>,
}

impl<'a, H: Host> Ctx<'a, H> {
    pub fn new(host: &'a H, cfg: &'a RuntimeConfig, reg: &'a Registry) -> Self {
        Self {
            host,
            cfg,
            reg,
            stores: Stores::default(),
            clients: RefCell::new(Vec::new()),
        }
    }

    pub async fn ds(&self, spec: &DsSpec) -> Result<Rc<<H::B as Backend>::Ds>, RuntimeError> {
        self.stores.get(self.host.backend(), spec).await
    }

    async fn client(&self, platform: &str) -> Result<Rc<<H::B as Backend>::Faas>, RuntimeError> {
        if let Some((_, c)) = self.clients.borrow().iter().find(|(p, _)| p == platform) {
            return Ok(c.clone());
        }
        let c = Rc::new(self.host.backend().faas_create(&FaasSpec::new(platform)).await?);
        self.clients.borrow_mut().push((platform.to_string(), c.clone()));
        Ok(c)
    }

    pub fn crash(&self, st: &WorkflowState, point: CrashPoint) -> Result<(), RuntimeError> {
        if self.host.should_crash(&st.id, point) {
            Err(RuntimeError::Crashed(point))
        } else {
            Ok(())
        }
    }
}

/// What happens to one successor slot of the invocation list.
#[derive(Debug, Clone)]
pub struct Entry {
    /// Name recorded in the invocation list.
    pub label: String,
    /// Invocation to perform; `None` records the label without invoking.
    pub action: Option<Invocation>,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub function: String,
    pub target: NextFunctionInfo,
    pub envelope: Envelope,
    /// Indirect fallback when a backup platform has a smaller limit.
    pub fallback_ref: Option<DataRef>,
}

/// Runs one delivery of a user function.
pub async fn handle<H: Host>(
    host: &H,
    cfg: &RuntimeConfig,
    reg: &Registry,
    sg: &SubGraph,
    env: &Envelope,
) -> Result<ExecOutcome, RuntimeError> {
    let ctx = Ctx::new(host, cfg, reg);
    let (inputs, st) = unwrap(host, &ctx.stores, env, sg).await?;
    let outcome = exec_with_output_checkpoint(&ctx, &st, &inputs).await?;
    ctx.crash(&st, CrashPoint::AfterOutputBeforeInvoke)?;
    let entries = plan_successors(&ctx, &st, &outcome).await?;
    invoke_next(&ctx, &st, entries).await?;
    if sg.terminal {
        host.record(RuntimeEvent::Completed {
            workflow_id: st.workflow_id.clone(),
        });
    }
    Ok(outcome)
}

/// One read of the output checkpoint; on a miss, run user code and
/// conditionally create the checkpoint, adopting the winner on a lost race.
pub async fn exec_with_output_checkpoint<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    inputs: &[Vec<u8>],
) -> Result<ExecOutcome, RuntimeError> {
    let key = &st.keys.output_key;
    let spec = checkpoint_store(&st.sub_graph, ctx.host.platform());
    let ds = ctx.ds(&spec).await?;
    match ds.get_value(key).await? {
        Some(StoredValue::Item(output)) => {
            return Ok(ExecOutcome {
                output,
                is_stored: true,
                from_checkpoint: true,
                location: spec,
            })
        }
        Some(_) => return Err(ShimError::WrongType(key.clone()).into()),
        None => {}
    }
    ctx.host.record(RuntimeEvent::UserExec(st.id.clone()));
    let fctx = FnContext {
        id: st.id.clone(),
        output_key: key.clone(),
        is_stored: false,
        iteration: st.iteration,
    };
    let output = ctx
        .reg
        .call(&st.sub_graph.this.name, &fctx, inputs)
        .map_err(RuntimeError::UserFunction)?;
    ctx.crash(st, CrashPoint::BeforeOutputCkpt)?;
    let (spec, ds) = if spec.kind == DsKind::Table && output.len() > TABLE_ITEM_LIMIT {
        let obj = DsSpec::new(spec.platform_id.clone(), DsKind::Object);
        let ds = ctx.ds(&obj).await?;
        (obj, ds)
    } else {
        (spec, ds)
    };
    if ds.store_output_data(key, &output).await? {
        return Ok(ExecOutcome {
            output,
            is_stored: true,
            from_checkpoint: false,
            location: spec,
        });
    }
    match ds.get_value(key).await? {
        Some(StoredValue::Item(first)) => Ok(ExecOutcome {
            output: first,
            is_stored: true,
            from_checkpoint: true,
            location: spec,
        }),
        _ => Err(RuntimeError::InvariantBreach(format!(
            "checkpoint `{key}` vanished after create"
        ))),
    }
}

fn child_envelope<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    outcome: &ExecOutcome,
    target: &NextFunctionInfo,
    step: u32,
    branch: BranchStack,
    iteration: u32,
) -> Invocation {
    let own_ref = DataRef {
        key: st.keys.output_key.clone(),
        ds: outcome.location.clone(),
    };
    let data = match choose_transfer(
        outcome.output.len() as u64,
        target.payload_limit,
        st.sub_graph.transfer.transfer_by_ds,
        ctx.cfg.envelope_allowance_bytes,
    ) {
        Transfer::Direct => Data::Direct {
            payload: outcome.output.clone(),
        },
        Transfer::Indirect => Data::Indirect {
            refs: vec![own_ref.clone()],
        },
    };
    let fallback_ref = matches!(data, Data::Direct { .. }).then_some(own_ref);
    Invocation {
        function: target.name.clone(),
        target: target.clone(),
        envelope: Envelope::new(
            Control {
                workflow_id: st.workflow_id.clone(),
                step,
                branch,
                session: st.session.clone(),
                invoke_mode: target.invoke_mode,
            },
            data,
            Meta {
                caller: Some(st.id.render()),
                iteration,
            },
        ),
        fallback_ref,
    }
}

fn invoke_entry<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    outcome: &ExecOutcome,
    target: &NextFunctionInfo,
    branch: BranchStack,
    iteration: u32,
) -> Entry {
    let step = st.step + 1;
    Entry {
        label: render_local(&target.name, step, &branch),
        action: Some(child_envelope(ctx, st, outcome, target, step, branch, iteration)),
    }
}

fn skip_entry(target: &NextFunctionInfo, step: u32, branch: &BranchStack) -> Entry {
    Entry {
        label: format!("~{}", render_local(&target.name, step, branch)),
        action: None,
    }
}

/// GC trigger label in invocation lists.
pub fn gc_label(platform: &str) -> String {
    format!("{GC_FUNCTION}@{platform}")
}

/// Successor slots in `nextFuncs` order, after any coordination the
/// primitive needs.
pub async fn plan_successors<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    outcome: &ExecOutcome,
) -> Result<Vec<Entry>, RuntimeError> {
    let sg = &st.sub_graph;
    let targets: Vec<&NextFunctionInfo> = sg.primitive_targets().collect();
    let params = &sg.invoke.params;
    let branch = &st.branch;
    let it = st.iteration;
    let mut entries = Vec::new();
    match sg.invoke.mode {
        InvokeMode::Sequence => entries.push(invoke_entry(ctx, st, outcome, targets[0], branch.clone(), it)),
        InvokeMode::Parallel => {
            for (i, t) in targets.iter().enumerate() {
                entries.push(invoke_entry(ctx, st, outcome, t, push_branch(branch, i as u32), it));
            }
        }
        InvokeMode::Map => {
            for i in 0..params.width.unwrap_or(1) {
                entries.push(invoke_entry(ctx, st, outcome, targets[0], push_branch(branch, i), it));
            }
        }
        InvokeMode::Choice => {
            let mut chosen = targets.len() - 1;
            for (i, p) in params.predicates.iter().enumerate() {
                if let Some(p) = p {
                    if ctx.reg.eval(p, &outcome.output)? {
                        chosen = i;
                        break;
                    }
                }
            }
            for (i, t) in targets.iter().enumerate() {
                entries.push(if i == chosen {
                    invoke_entry(ctx, st, outcome, t, branch.clone(), it)
                } else {
                    skip_entry(t, st.step + 1, branch)
                });
            }
        }
        InvokeMode::Cycle => {
            let bound = params.bound.unwrap_or(1);
            let again = it + 1 < bound
                && match &params.predicate {
                    Some(p) => ctx.reg.eval(p, &outcome.output)?,
                    None => true,
                };
            let (head, exit) = (targets[0], targets[1]);
            if again {
                entries.push(invoke_entry(ctx, st, outcome, head, branch.clone(), it + 1));
                entries.push(skip_entry(exit, st.step + 1, branch));
            } else {
                entries.push(skip_entry(head, st.step + 1, branch));
                entries.push(invoke_entry(ctx, st, outcome, exit, branch.clone(), 0));
            }
        }
        InvokeMode::FanIn => {
            let spec = params
                .fan_in
                .as_ref()
                .ok_or_else(|| RuntimeError::InvariantBreach("fan-in without participant list".into()))?;
            let fi = coordinate_fan_in(ctx, st, spec).await?;
            let label = fi.aggregator.local();
            entries.push(if fi.closer {
                let target = targets[0];
                Entry {
                    label,
                    action: Some(Invocation {
                        function: target.name.clone(),
                        target: target.clone(),
                        envelope: Envelope::new(
                            Control {
                                workflow_id: st.workflow_id.clone(),
                                step: fi.aggregator.step,
                                branch: fi.aggregator.branch.clone(),
                                session: st.session.clone(),
                                invoke_mode: InvokeMode::FanIn,
                            },
                            Data::Indirect { refs: fi.refs },
                            Meta {
                                caller: Some(st.id.render()),
                                iteration: it,
                            },
                        ),
                        fallback_ref: None,
                    }),
                }
            } else {
                Entry {
                    label: format!("&{label}"),
                    action: None,
                }
            });
        }
        InvokeMode::ByRedundant | InvokeMode::ByBatch => match coordinate_collab(ctx, st, outcome).await? {
            CollabOutcome::Invoke(inv) => {
                let label = if inv.envelope.control.workflow_id == st.workflow_id {
                    render_local(&inv.function, inv.envelope.control.step, &inv.envelope.control.branch)
                } else {
                    format!(
                        "{}/{}",
                        inv.envelope.control.workflow_id,
                        render_local(&inv.function, inv.envelope.control.step, &inv.envelope.control.branch)
                    )
                };
                entries.push(Entry {
                    label,
                    action: Some(*inv),
                });
            }
            CollabOutcome::Recorded(marker) => entries.push(Entry {
                label: format!("&{marker}"),
                action: None,
            }),
        },
        InvokeMode::Terminal | InvokeMode::Gc => {}
    }
    if sg.terminal {
        for g in sg.gc_targets() {
            entries.push(Entry {
                label: gc_label(&g.platform),
                action: Some(Invocation {
                    function: GC_FUNCTION.to_string(),
                    target: g.clone(),
                    envelope: Envelope::new(
                        Control {
                            workflow_id: st.workflow_id.clone(),
                            step: 0,
                            branch: BranchStack::new(),
                            session: st.session.clone(),
                            invoke_mode: InvokeMode::Gc,
                        },
                        Data::Direct { payload: Vec::new() },
                        Meta {
                            caller: Some(st.id.render()),
                            iteration: 0,
                        },
                    ),
                    fallback_ref: None,
                }),
            });
        }
    }
    Ok(entries)
}

/// Invocation checkpoint: create the list, read it once, then invoke the
/// unrecorded slots group by group, appending each group once it is invoked.
pub async fn invoke_next<H: Host>(
    ctx: &Ctx<'_, H>,
    st: &WorkflowState,
    entries: Vec<Entry>,
) -> Result<(), RuntimeError> {
    let key = &st.keys.ivk_key;
    let terminal = st.sub_graph.terminal;
    let ds = ctx.ds(&DsSpec::new(ctx.host.platform(), DsKind::Table)).await?;
    ds.create_invocation_list(key).await?;
    let recorded = match ds.get_value(key).await? {
        Some(StoredValue::List(l)) => l,
        // a terminal's list may already be swept by its own GC
        None if terminal => return Ok(()),
        None => return Err(ShimError::MissingList(key.clone()).into()),
        Some(_) => return Err(ShimError::WrongType(key.clone()).into()),
    };
    let pending: Vec<Entry> = entries.into_iter().filter(|e| !recorded.contains(&e.label)).collect();
    let group_size = ctx.cfg.group_size.max(1);
    for (k, group) in pending.chunks(group_size).enumerate() {
        let actions: Vec<&Entry> = group.iter().filter(|e| e.action.is_some()).collect();
        let point = CrashPoint::MidInvokeBatch(k as u32 + 1);
        if ctx.host.should_crash(&st.id, point) {
            let half = actions.len().div_ceil(2);
            join_all(
                actions[..half]
                    .iter()
                    .map(|e| invoke_with_failover(ctx, e.action.as_ref().expect("action"))),
            )
            .await;
            return Err(RuntimeError::Crashed(point));
        }
        let results = join_all(
            actions
                .iter()
                .map(|e| invoke_with_failover(ctx, e.action.as_ref().expect("action"))),
        )
        .await;
        let mut failed_gc = Vec::new();
        for (e, r) in actions.iter().zip(results) {
            if let Err(err) = r {
                let inv = e.action.as_ref().expect("action");
                if inv.function == GC_FUNCTION {
                    ctx.host.record(RuntimeEvent::GcTriggerFailed {
                        workflow_id: st.workflow_id.clone(),
                        platform: inv.target.platform.clone(),
                    });
                    failed_gc.push(e.label.clone());
                } else {
                    return Err(err);
                }
            }
        }
        ctx.crash(st, CrashPoint::AfterInvokeBeforeIvkAppend)?;
        if ctx.cfg.mutation == Some(ProtocolMutation::SkipInvocationAppend) {
            continue;
        }
        let labels: Vec<String> = group
            .iter()
            .map(|e| e.label.clone())
            .filter(|l| !failed_gc.contains(l))
            .collect();
        if labels.is_empty() {
            continue;
        }
        match ds.append_and_get_list(key, &labels).await {
            Ok(_) => {}
            Err(ShimError::MissingList(_)) if terminal => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

async fn invoke_with_failover<H: Host>(ctx: &Ctx<'_, H>, inv: &Invocation) -> Result<(), RuntimeError> {
    let primary = async {
        let client = ctx.client(&inv.target.platform).await?;
        client
            .async_invoke(&inv.function, &inv.envelope)
            .await
            .map_err(RuntimeError::from)
    }
    .await;
    match primary {
        Ok(_) => Ok(()),
        Err(RuntimeError::Shim(e)) if e.triggers_failover() => failover_invoke(ctx, inv).await,
        Err(e) => Err(e),
    }
}

/// Tries each backup platform in order with a freshly created client.
pub async fn failover_invoke<H: Host>(ctx: &Ctx<'_, H>, inv: &Invocation) -> Result<(), RuntimeError> {
    for platform in &inv.target.failover {
        let Ok(client) = ctx.host.backend().faas_create(&FaasSpec::new(platform.clone())).await else {
            continue;
        };
        let mut env = inv.envelope.clone();
        if let (Data::Direct { payload }, Some(r)) = (&env.data, &inv.fallback_ref) {
            let fits = choose_transfer(
                payload.len() as u64,
                client.payload_limit(),
                false,
                ctx.cfg.envelope_allowance_bytes,
            );
            if fits == Transfer::Indirect {
                env.data = Data::Indirect { refs: vec![r.clone()] };
            }
        }
        match client.async_invoke(&inv.function, &env).await {
            Ok(_) => return Ok(()),
            Err(e) if e.triggers_failover() => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(RuntimeError::AllPlatformsFailed(inv.function.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_choice_follows_limits() {
        let kb = 1024;
        assert_eq!(choose_transfer(kb, 262_144, false, 4096), Transfer::Direct);
        assert_eq!(choose_transfer(300 * kb, 131_072, false, 4096), Transfer::Indirect);
        assert_eq!(choose_transfer(300 * kb, 262_144, false, 4096), Transfer::Indirect);
        assert_eq!(choose_transfer(1, 262_144, true, 4096), Transfer::Indirect);
        // the allowance counts against the limit
        assert_eq!(choose_transfer(262_144 - 4096, 262_144, false, 4096), Transfer::Direct);
        assert_eq!(
            choose_transfer(262_144 - 4095, 262_144, false, 4096),
            Transfer::Indirect
        );
    }
}
