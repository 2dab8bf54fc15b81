//! Where a sub-graph's shared data lives.

use crate::ir::{majority_platform, Placement, SubGraph};
use crate::shim::{DsKind, DsSpec};

/// Majority platform among the function and its successors, in the
/// sub-graph's declared store kind. Explicit placements are kept.
pub fn resolve_placement(sg: &SubGraph) -> DsSpec {
    let platform = match &sg.transfer.placement {
        Placement::Platform(p) => p.clone(),
        Placement::AutoMajority => {
            let others: Vec<&str> = sg.primitive_targets().map(|n| n.platform.as_str()).collect();
            majority_platform(&sg.this.platform, &others)
        }
    };
    DsSpec::new(platform, sg.transfer.ds)
}

/// Store holding the output checkpoint: the placement store when data moves
/// through a datastore, else the executing platform's table.
pub fn checkpoint_store(sg: &SubGraph, executing_platform: &str) -> DsSpec {
    if sg.transfer.transfer_by_ds {
        resolve_placement(sg)
    } else {
        DsSpec::new(executing_platform, DsKind::Table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{FunctionDecl, InvokeMode, InvokeParams, InvokePrimitive, NextFunctionInfo, TransferPrimitive};

    fn sg(platform: &str, targets: &[&str]) -> SubGraph {
        SubGraph {
            this: FunctionDecl {
                name: "A".into(),
                platform: platform.into(),
                failover: vec![],
                memory_class: None,
            },
            invoke: InvokePrimitive {
                mode: InvokeMode::Parallel,
                targets: (0..targets.len()).map(|i| format!("T{i}")).collect(),
                params: InvokeParams::default(),
            },
            transfer: TransferPrimitive::default(),
            next_funcs: targets
                .iter()
                .enumerate()
                .map(|(i, p)| NextFunctionInfo {
                    name: format!("T{i}"),
                    platform: p.to_string(),
                    invoke_mode: InvokeMode::Parallel,
                    failover: vec![],
                    payload_limit: 1,
                })
                .collect(),
            terminal: false,
        }
    }

    #[test]
    fn fan_out_to_other_cloud_moves_data_there() {
        assert_eq!(resolve_placement(&sg("P1", &["P2", "P2", "P2"])).platform_id, "P2");
    }

    #[test]
    fn sequence_tie_stays_local() {
        assert_eq!(resolve_placement(&sg("P1", &["P2"])).platform_id, "P1");
    }

    #[test]
    fn all_local() {
        assert_eq!(resolve_placement(&sg("P1", &["P1", "P1"])).platform_id, "P1");
    }

    #[test]
    fn checkpoint_follows_executor_unless_by_ds() {
        let mut g = sg("P1", &["P2", "P2"]);
        assert_eq!(checkpoint_store(&g, "P3"), DsSpec::new("P3", DsKind::Table));
        g.transfer.transfer_by_ds = true;
        assert_eq!(checkpoint_store(&g, "P3"), DsSpec::new("P2", DsKind::Object));
    }
}
