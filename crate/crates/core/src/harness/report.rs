//! Scenario reports: JSON with a stable field order, a plain-text table,
//! and a structural diff.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sim::cloud::{DeadLetter, RunStatus};
use crate::sim::OpCounts;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssertionVerdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RepetitionReport {
    pub seed: u64,
    pub events: u64,
    pub final_tick: u64,
    pub completed: usize,
    pub failed: usize,
    pub incomplete: usize,
    pub runs: Vec<RunStatus>,
    pub totals: OpCounts,
    pub op_counts: BTreeMap<String, OpCounts>,
    pub duplicate_executions: BTreeMap<String, u64>,
    pub crashes: u64,
    pub dead_letters: Vec<DeadLetter>,
    /// Cross-cloud operations per function name, summed over instances.
    pub egress: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Report {
    pub version: u32,
    pub scenario: String,
    pub workflow: String,
    pub seed: u64,
    /// Data placement of every sub-graph that stores shared data.
    pub placement: BTreeMap<String, String>,
    pub repetitions: Vec<RepetitionReport>,
    pub assertions: Vec<AssertionVerdict>,
    pub passed: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario  {}  workflow {}  seed {}",
            self.scenario, self.workflow, self.seed
        );
        for (i, rep) in self.repetitions.iter().enumerate() {
            let _ = writeln!(
                out,
                "rep {i}  seed {}  events {}  ticks {}  completed {}  failed {}  incomplete {}  crashes {}",
                rep.seed, rep.events, rep.final_tick, rep.completed, rep.failed, rep.incomplete, rep.crashes
            );
            let mut by_fn: BTreeMap<String, (u64, OpCounts)> = BTreeMap::new();
            for (id, c) in &rep.op_counts {
                let name = id
                    .rsplit_once('/')
                    .map(|(_, l)| l.split('_').next().unwrap_or(l))
                    .unwrap_or(id.as_str());
                let e = by_fn.entry(name.to_string()).or_default();
                e.0 += 1;
                e.1 += *c;
            }
            let header = [
                "function", "inst", "W", "R", "objW", "objR", "invokes", "xcloud", "faas", "ds",
            ];
            let rows: Vec<Vec<String>> = by_fn
                .iter()
                .map(|(n, (k, c))| {
                    vec![
                        n.clone(),
                        k.to_string(),
                        c.writes.to_string(),
                        c.reads.to_string(),
                        c.object_writes.to_string(),
                        c.object_reads.to_string(),
                        c.invokes.to_string(),
                        c.cross_cloud_transfers.to_string(),
                        c.faas_creates.to_string(),
                        c.ds_creates.to_string(),
                    ]
                })
                .collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].len())
                        .chain([header[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                let mut l = String::new();
                for (i, c) in cells.iter().enumerate() {
                    if i == 0 {
                        let _ = write!(l, "{c:<w$}", w = widths[i]);
                    } else {
                        let _ = write!(l, "  {c:>w$}", w = widths[i]);
                    }
                }
                l.trim_end().to_string()
            };
            let _ = writeln!(out, "{}", line(&header.map(String::from)));
            for r in &rows {
                let _ = writeln!(out, "{}", line(r));
            }
        }
        for a in &self.assertions {
            let _ = writeln!(
                out,
                "{:<20} {}  {}",
                a.name,
                if a.passed { "PASS" } else { "FAIL" },
                a.detail
            );
        }
        let _ = writeln!(out, "result  {}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

/// JSON paths at which two documents differ, with both values.
pub fn diff_values(a: &Value, b: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk("$", a, b, &mut out);
    out
}

fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => walk(&p, u, v, out),
                    (u, v) => out.push(format!("{p}: {} != {}", show(u), show(v))),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            for i in 0..x.len().max(y.len()) {
                let p = format!("{path}[{i}]");
                match (x.get(i), y.get(i)) {
                    (Some(u), Some(v)) => walk(&p, u, v, out),
                    (u, v) => out.push(format!("{p}: {} != {}", show(u), show(v))),
                }
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

fn show(v: Option<&Value>) -> String {
    v.map(Value::to_string).unwrap_or_else(|| "<absent>".into())
}
