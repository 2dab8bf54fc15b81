//! Bundled workflows, topologies and scenarios.

use serde_json::{json, Value};

use crate::sim::topology::{ALIYUN_LIKE_LIMIT, AWS_LIKE_LIMIT};
use crate::sim::Topology;

/// Names accepted by [`workflow`]; `iot-N` and `mc-K` take any size.
pub const WORKFLOW_FIXTURES: [&str; 8] = [
    "iot-10",
    "mc-32",
    "diamond",
    "seq-3",
    "fanout-3-fanin",
    "cycle-2",
    "failover",
    "failover-disabled",
];

pub const TOPOLOGY_FIXTURES: [&str; 2] = ["two-platform", "three-platform"];

pub const SCENARIO_FIXTURES: [&str; 4] = ["iot-10", "mc-32", "diamond", "failover"];

fn platforms(n: usize) -> Value {
    let mut m = serde_json::Map::new();
    for (i, limit) in [AWS_LIKE_LIMIT, ALIYUN_LIKE_LIMIT, AWS_LIKE_LIMIT]
        .into_iter()
        .take(n)
        .enumerate()
    {
        m.insert(format!("P{}", i + 1), json!({ "payloadLimitBytes": limit }));
    }
    Value::Object(m)
}

fn seq_edges(names: &[String]) -> Vec<Value> {
    names
        .windows(2)
        .map(|w| json!({"from": w[0], "to": w[1], "mode": "sequence"}))
        .collect()
}

/// Chain of `n` functions alternating between P1 and P2.
pub fn iot(n: usize) -> Value {
    let names: Vec<String> = (1..=n).map(|i| format!("f{i}")).collect();
    let functions: serde_json::Map<String, Value> = names
        .iter()
        .enumerate()
        .map(|(i, f)| (f.clone(), json!({ "platform": if i % 2 == 0 { "P1" } else { "P2" } })))
        .collect();
    json!({
        "name": format!("iot-{n}"),
        "platforms": platforms(2),
        "functions": functions,
        "edges": seq_edges(&names),
        "entry": names[0],
        "terminal": names[n - 1],
    })
}

/// Map of width `k` over `data_process` and a fan-in into the aggregation.
pub fn mc(k: u32) -> Value {
    json!({
        "name": format!("mc-{k}"),
        "platforms": platforms(2),
        "functions": {
            "data_map": {"platform": "P1"},
            "data_process": {"platform": "P2"},
            "data_aggregation": {"platform": "P1"},
        },
        "edges": [
            {"from": "data_map", "to": "data_process", "mode": "map", "params": {"width": k}},
            {"from": "data_process", "to": "data_aggregation", "mode": "fanin"},
        ],
        "entry": "data_map",
        "terminal": "data_aggregation",
    })
}

fn failover_demo(backup: bool) -> Value {
    let failover: Vec<&str> = if backup { vec!["P3"] } else { vec![] };
    json!({
        "name": if backup { "failover" } else { "failover-disabled" },
        "platforms": platforms(3),
        "functions": {
            "A": {"platform": "P1"},
            "B": {"platform": "P2", "failover": failover},
            "C": {"platform": "P1"},
        },
        "edges": [
            {"from": "A", "to": "B", "mode": "sequence"},
            {"from": "B", "to": "C", "mode": "sequence"},
        ],
        "entry": "A",
        "terminal": "C",
    })
}

/// Workflow document of a bundled fixture.
pub fn workflow(name: &str) -> Option<Value> {
    if let Some(n) = name.strip_prefix("iot-").and_then(|n| n.parse::<usize>().ok()) {
        return (n >= 1).then(|| iot(n));
    }
    if let Some(k) = name.strip_prefix("mc-").and_then(|k| k.parse::<u32>().ok()) {
        return (k >= 1).then(|| mc(k));
    }
    Some(match name {
        "seq-3" => {
            let mut v = iot(3);
            v["name"] = json!("seq-3");
            v
        }
        "diamond" => json!({
            "name": "diamond",
            "platforms": platforms(2),
            "functions": {"A": {"platform": "P1"}, "B": {"platform": "P2"}, "C": {"platform": "P2"}, "D": {"platform": "P1"}},
            "edges": [
                {"from": "A", "to": "B", "mode": "parallel"},
                {"from": "A", "to": "C", "mode": "parallel"},
                {"from": "B", "to": "D", "mode": "fanin"},
                {"from": "C", "to": "D", "mode": "fanin"},
            ],
            "entry": "A",
            "terminal": "D",
        }),
        "fanout-3-fanin" => json!({
            "name": "fanout-3-fanin",
            "platforms": platforms(2),
            "functions": {
                "A": {"platform": "P1"}, "B": {"platform": "P2"}, "C": {"platform": "P1"},
                "D": {"platform": "P2"}, "E": {"platform": "P1"},
            },
            "edges": [
                {"from": "A", "to": "B", "mode": "parallel"},
                {"from": "A", "to": "C", "mode": "parallel"},
                {"from": "A", "to": "D", "mode": "parallel"},
                {"from": "B", "to": "E", "mode": "fanin"},
                {"from": "C", "to": "E", "mode": "fanin"},
                {"from": "D", "to": "E", "mode": "fanin"},
            ],
            "entry": "A",
            "terminal": "E",
        }),
        "cycle-2" => json!({
            "name": "cycle-2",
            "platforms": platforms(2),
            "functions": {"A": {"platform": "P1"}, "B": {"platform": "P2"}, "C": {"platform": "P1"}},
            "edges": [
                {"from": "A", "to": "B", "mode": "sequence"},
                {"from": "B", "to": "B", "mode": "cycle", "params": {"bound": 2}},
                {"from": "B", "to": "C", "mode": "sequence"},
            ],
            "entry": "A",
            "terminal": "C",
        }),
        "failover" => failover_demo(true),
        "failover-disabled" => failover_demo(false),
        _ => return None,
    })
}

pub fn topology(name: &str) -> Option<Topology> {
    match name {
        "two-platform" => Some(Topology::two_platform()),
        "three-platform" => Some(Topology::three_platform()),
        _ => None,
    }
}

/// Submission tick spacing of the bundled failover scenario.
pub const FAILOVER_INTERVAL: u64 = 100;
pub const FAILOVER_RUNS: u64 = 100;
/// Submissions whose `A -> B` hop falls inside the outage.
pub const FAILOVER_AFFECTED: std::ops::RangeInclusive<u64> = 45..=54;

/// Scenario document of a bundled fixture. Workflows and topologies are
/// referenced by fixture name.
pub fn scenario(name: &str) -> Option<Value> {
    Some(match name {
        "iot-10" => json!({
            "name": "iot-10",
            "workflow": "fixture:iot-10",
            "topology": "fixture:two-platform",
            "seed": 1,
            "submissions": {"count": 1, "inputBytes": 1024},
            "assertions": ["all-complete", "op-counts", "exactly-once", "gc-residue"],
        }),
        "mc-32" => json!({
            "name": "mc-32",
            "workflow": "fixture:mc-32",
            "topology": "fixture:two-platform",
            "seed": 1,
            "submissions": {"count": 1, "inputBytes": 1024},
            "assertions": ["all-complete", "op-counts", "exactly-once", "gc-residue"],
        }),
        "diamond" => json!({
            "name": "diamond",
            "workflow": "fixture:diamond",
            "topology": "fixture:two-platform",
            "seed": 1,
            "submissions": {"count": 4, "interval": 3, "inputBytes": 1024},
            "assertions": ["all-complete", "op-counts", "exactly-once", "gc-residue"],
        }),
        "failover" => {
            // A run's `A -> B` invocation ends 7 ticks after submission and
            // its GC sweeps start about 85 ticks after. The outage opens at
            // the first affected submission and closes once every retry of
            // the last affected `A -> B` hop is over, before any unaffected
            // run touches P2.
            let start = FAILOVER_AFFECTED.start() * FAILOVER_INTERVAL;
            let end = FAILOVER_AFFECTED.end() * FAILOVER_INTERVAL + 30;
            json!({
                "name": "failover",
                "workflow": "fixture:failover",
                "topology": "fixture:three-platform",
                "faultPlan": {"outages": [{"platformId": "P2", "startEvent": start, "endEvent": end}]},
                "seed": 1,
                "submissions": {"count": FAILOVER_RUNS, "interval": FAILOVER_INTERVAL, "inputBytes": 1024},
                "assertions": ["all-complete", "exactly-once", "gc-residue", "failover-extra-ops"],
            })
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{compile_subgraphs, parse_workflow_def};

    #[test]
    fn every_workflow_fixture_compiles() {
        for name in WORKFLOW_FIXTURES.iter().chain(&["iot-1", "mc-3"]) {
            let text = workflow(name).unwrap().to_string();
            let def = parse_workflow_def(&text).unwrap_or_else(|e| panic!("{name}: {e:?}"));
            compile_subgraphs(&def).unwrap_or_else(|e| panic!("{name}: {e:?}"));
        }
        assert!(workflow("iot-0").is_none());
        assert!(workflow("nope").is_none());
    }

    #[test]
    fn iot_alternates_platforms() {
        let v = iot(4);
        assert_eq!(v["functions"]["f1"]["platform"], "P1");
        assert_eq!(v["functions"]["f2"]["platform"], "P2");
        assert_eq!(v["edges"].as_array().unwrap().len(), 3);
    }
}
