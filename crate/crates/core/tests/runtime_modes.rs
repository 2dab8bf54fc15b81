//! End-to-end runs of the primitives the acceptance suite does not cover in
//! depth: choice, redundant replicas and cross-run batching.

mod common;

use std::collections::BTreeSet;

use serde_json::{json, Value};

use crossflow::naming::FunctionId;
use crossflow::runtime::{Registry, RuntimeConfig};
use crossflow::sim::oracle::{check_observables, enumerate_crash_points, Workload};
use crossflow::sim::{FaultPlan, RunReport, RunState, SimCloud, Topology};

fn doc(functions: Value, edges: Value, entry: &str, terminal: &str) -> Value {
    json!({
        "name": "modes",
        "platforms": {"P1": {"payloadLimitBytes": 262144}, "P2": {"payloadLimitBytes": 131072}},
        "functions": functions, "edges": edges, "entry": entry, "terminal": terminal
    })
}

fn ran(report: &RunReport) -> BTreeSet<String> {
    report
        .executions
        .keys()
        .map(|k| FunctionId::parse(k).unwrap().local())
        .collect()
}

fn run(v: &Value, registry: Registry, inputs: &[&[u8]]) -> (SimCloud, RunReport, Vec<String>) {
    let (def, set) = common::compile(v);
    let sim = SimCloud::configure_sim(Topology::two_platform(), FaultPlan::none(), 11).unwrap();
    sim.deploy(set, registry, RuntimeConfig::default()).unwrap();
    let wids = inputs
        .iter()
        .map(|i| sim.submit(&def.entry, i.to_vec()).unwrap())
        .collect();
    let report = sim.run_until_quiescent(1_000_000).unwrap();
    (sim, report, wids)
}

fn choice_doc() -> Value {
    doc(
        json!({"A": {"platform": "P1"}, "Big": {"platform": "P2"}, "Small": {"platform": "P2"}, "End": {"platform": "P1"}}),
        json!([
            {"from": "A", "to": "Big", "mode": "choice", "params": {"predicate": "large"}},
            {"from": "A", "to": "Small", "mode": "choice"},
            {"from": "Big", "to": "End", "mode": "sequence"},
            {"from": "Small", "to": "End", "mode": "sequence"}
        ]),
        "A",
        "End",
    )
}

#[test]
fn choice_takes_exactly_one_branch() {
    let registry = || Registry::new().predicate("large", |out| out.len() > 4);
    for (input, taken, skipped) in [(&b"abcdefgh"[..], "Big_1", "Small_1"), (&b"ab"[..], "Small_1", "Big_1")] {
        let (sim, report, wids) = run(&choice_doc(), registry(), &[input]);
        assert_eq!(report.status(&wids[0]), Some(RunState::Completed));
        let names = ran(&report);
        assert!(names.contains(taken), "{names:?}");
        assert!(!names.contains(skipped), "{names:?}");
        assert!(report.residue(&wids[0]).is_empty());
        assert!(check_observables(&sim.history(), &BTreeSet::new()).is_empty());
    }
}

#[test]
fn choice_survives_every_crash_point() {
    let (def, set) = common::compile(&choice_doc());
    let w = Workload {
        topology: Topology::two_platform(),
        set,
        registry: Registry::new().predicate("large", |out| out.len() > 4),
        cfg: RuntimeConfig::default(),
        entry: def.entry.clone(),
        input: b"abcdefgh".to_vec(),
        seed: 2,
    };
    let v = enumerate_crash_points(&w, 1).unwrap();
    assert!(v.passed(), "{:?}", v.violations);
}

fn redundant_doc() -> Value {
    doc(
        json!({"A": {"platform": "P1"}, "R": {"platform": "P2"}, "S": {"platform": "P1"}}),
        json!([
            {"from": "A", "to": "R", "mode": "map", "params": {"width": 3}},
            {"from": "R", "to": "S", "mode": "redundant", "params": {"count": 3}}
        ]),
        "A",
        "S",
    )
}

#[test]
fn redundant_replicas_invoke_successor_once() {
    let (sim, report, wids) = run(&redundant_doc(), Registry::new(), &[b"req"]);
    assert_eq!(report.status(&wids[0]), Some(RunState::Completed));
    let names = ran(&report);
    let want: BTreeSet<String> = ["A_0", "R_1-bindex-0", "R_1-bindex-1", "R_1-bindex-2", "S_2"]
        .map(String::from)
        .into();
    assert_eq!(names, want);
    let invokes = sim
        .history()
        .records
        .iter()
        .filter(|r| r.op == "async_invoke" && r.key == "S" && r.is_ok())
        .count();
    assert_eq!(invokes, 1);
    assert!(report.duplicate_executions.is_empty());
    assert!(report.residue(&wids[0]).is_empty());
}

#[test]
fn batches_group_contributions_from_separate_runs() {
    let v = doc(
        json!({"Src": {"platform": "P2"}, "Sink": {"platform": "P1"}}),
        json!([{"from": "Src", "to": "Sink", "mode": "batch", "params": {"batchSize": 2}}]),
        "Src",
        // Batch targets start their own region; the submitting run ends at Src.
        "Src",
    );
    let inputs: [&[u8]; 5] = [b"r0", b"r1", b"r2", b"r3", b"r4"];
    let (sim, report, _) = run(&v, Registry::new(), &inputs);
    let sinks: Vec<_> = report.executions.keys().filter(|k| k.ends_with("/Sink_0")).collect();
    // Two full windows; the fifth contribution waits for a partner.
    assert_eq!(sinks.len(), 2, "{sinks:?}");
    let refs: usize = sim
        .history()
        .records
        .iter()
        .filter(|r| r.op == "async_invoke" && r.key == "Sink" && r.is_ok())
        .count();
    assert_eq!(refs, 2);
    assert!(report.duplicate_executions.is_empty());
}
