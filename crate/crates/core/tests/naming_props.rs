mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use crossflow::ir::{instantiate, Instance};
use crossflow::naming::{
    compute_function_id, derive_keys, pop_and_merge, push_branch, render_local, BranchStack, FunctionId,
};
use crossflow::runtime::Registry;
use crossflow::runtime::RuntimeConfig;
use crossflow::sim::{FaultPlan, RunState, SimCloud, Topology};

fn stack() -> impl Strategy<Value = BranchStack> {
    prop::collection::vec(0u32..12, 0..6).prop_map(BranchStack::from_levels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rendered_ids_parse_back(name in "[A-Za-z][A-Za-z0-9_]{0,12}", step in 0u32..1000, b in stack()) {
        let id = compute_function_id("wf-1", &name, step, &b);
        prop_assert_eq!(FunctionId::parse(&id.render()).unwrap(), id);
    }

    #[test]
    fn distinct_coordinates_render_distinctly(
        a in ("[A-C]", 0u32..5, stack()),
        b in ("[A-C]", 0u32..5, stack()),
    ) {
        prop_assume!(a != b);
        prop_assert_ne!(render_local(&a.0, a.1, &a.2), render_local(&b.0, b.1, &b.2));
    }

    #[test]
    fn keys_are_prefixed_and_distinct(step in 0u32..50, b in stack()) {
        let id = compute_function_id("run-9", "F", step, &b);
        let k = derive_keys(&id);
        for key in [&k.output_key, &k.ivk_key, &k.bitmap_key] {
            prop_assert!(key.starts_with("run-9/"));
        }
        prop_assert_ne!(&k.output_key, &k.ivk_key);
        prop_assert_ne!(&k.ivk_key, &k.bitmap_key);
    }

    #[test]
    fn push_then_pop_restores(b in stack(), i in 0u32..12) {
        let pushed = push_branch(&b, i);
        prop_assert_eq!(pushed.depth(), b.depth() + 1);
        prop_assert_eq!(pushed.popped().unwrap(), b.clone());
        // Siblings merge back into their common parent.
        let merged = pop_and_merge(&[push_branch(&b, 0), push_branch(&b, i)]).unwrap();
        prop_assert_eq!(merged, b);
    }

    #[test]
    fn generated_workflows_name_every_instance_once((doc, expected) in common::dag_strategy(50)) {
        let (def, _) = common::compile(&doc);
        let exps = instantiate(&def).unwrap();
        let locals: Vec<String> = exps.iter().flat_map(|e| e.instances.iter().map(Instance::local)).collect();
        let distinct: BTreeSet<&String> = locals.iter().collect();
        prop_assert_eq!(distinct.len(), locals.len(), "collision in {:?}", locals);
        prop_assert_eq!(locals.len() as u32, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The runtime executes exactly the statically expanded instances.
    #[test]
    fn runtime_ids_match_static_expansion((doc, _) in common::dag_strategy(30)) {
        let (def, set) = common::compile(&doc);
        let expected: BTreeSet<String> = instantiate(&def).unwrap()
            .iter().flat_map(|e| e.instances.iter().map(Instance::local)).collect();
        let sim = SimCloud::configure_sim(Topology::two_platform(), FaultPlan::none(), 3).unwrap();
        sim.deploy(set, Registry::new(), RuntimeConfig::default()).unwrap();
        let wid = sim.submit(&def.entry, b"x".to_vec()).unwrap();
        let report = sim.run_until_quiescent(1_000_000).unwrap();
        prop_assert_eq!(report.status(&wid), Some(RunState::Completed));
        let ran: BTreeSet<String> = report.executions.keys()
            .map(|k| FunctionId::parse(k).unwrap().local()).collect();
        prop_assert_eq!(ran, expected);
        prop_assert!(report.duplicate_executions.is_empty());
        prop_assert!(report.residue(&wid).is_empty());
    }
}
