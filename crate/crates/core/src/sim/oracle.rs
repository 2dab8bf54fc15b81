//! Exactly-once oracle: checks the checkpointed observables of a run's
//! history and enumerates crash schedules against a fault-free baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ir::{SubGraphSet, GC_FUNCTION};
use crate::naming::IVK_SUFFIX;
use crate::runtime::{Coordination, CrashPoint, Registry, RuntimeConfig};

use super::cloud::{RunReport, RunState, SimCloud};
use super::history::History;
use super::linearizability::check_history;
use super::topology::{CrashRule, FaultPlan, Topology};
use super::SimError;

/// Event budget of one oracle run.
pub const RUN_EVENT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Violation {
    /// Fault schedule of the offending run, `baseline` for the fault-free run.
    pub schedule: String,
    pub observable: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Verdict {
    pub runs: usize,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A deployable workflow with the single input the oracle submits.
#[derive(Clone)]
pub struct Workload {
    pub topology: Topology,
    pub set: SubGraphSet,
    pub registry: Registry,
    pub cfg: RuntimeConfig,
    pub entry: String,
    pub input: Vec<u8>,
    pub seed: u64,
}

impl Workload {
    /// Deploys on a fresh simulator, submits once and runs to quiescence.
    pub fn run(&self, plan: FaultPlan) -> Result<(RunReport, History), SimError> {
        let sim = SimCloud::configure_sim(self.topology.clone(), plan, self.seed)?;
        sim.deploy(self.set.clone(), self.registry.clone(), self.cfg.clone())?;
        sim.submit(&self.entry, self.input.clone())?;
        let report = sim.run_until_quiescent(RUN_EVENT_BUDGET)?;
        Ok((report, sim.history()))
    }

    fn aggregators(&self) -> BTreeSet<String> {
        self.set
            .values()
            .filter_map(|sg| sg.invoke.params.fan_in.as_ref().map(|f| f.aggregator.clone()))
            .collect()
    }
}

fn ok_bool(v: Option<&Value>) -> bool {
    v.and_then(Value::as_bool).unwrap_or(false)
}

/// Output keys conditionally created by the run, with their value digests.
pub fn created_outputs(history: &History) -> BTreeMap<String, String> {
    history
        .records
        .iter()
        .filter(|r| r.op == "store_output_data" && ok_bool(r.ok()))
        .map(|r| {
            (
                format!("{}:{}", r.target, r.key),
                r.args["digest"].as_str().unwrap_or_default().to_string(),
            )
        })
        .collect()
}

/// Checks observables (a) to (c) on one history. `exempt` names callees that
/// may legitimately have several distinct callers.
pub fn check_observables(history: &History, exempt: &BTreeSet<String>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut creates: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for r in history
        .records
        .iter()
        .filter(|r| r.op == "store_output_data" && ok_bool(r.ok()))
    {
        creates
            .entry((&r.target, &r.key))
            .or_default()
            .push(r.args["digest"].as_str().unwrap_or_default());
    }
    for ((store, key), digests) in &creates {
        if digests.len() > 1 {
            out.push(("a".into(), format!("`{store}:{key}` created {} times", digests.len())));
        }
    }
    for r in history.records.iter().filter(|r| r.op == "get_value") {
        let Some(v) = r.ok().filter(|v| v["type"] == "item") else {
            continue;
        };
        let created = creates.get(&(r.target.as_str(), r.key.as_str()));
        if created.and_then(|d| d.first()).copied() != v["digest"].as_str() {
            out.push((
                "a".into(),
                format!("read of `{}:{}` returned a value never created", r.target, r.key),
            ));
        }
    }

    let mut appended: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for r in history
        .records
        .iter()
        .filter(|r| r.op == "append_and_get_list" && r.is_ok())
    {
        let list: Vec<&str> = r
            .ok()
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .collect();
        let distinct: BTreeSet<&str> = list.iter().copied().collect();
        if distinct.len() != list.len() {
            out.push((
                "b".into(),
                format!("list `{}:{}` holds a duplicate name", r.target, r.key),
            ));
        }
        if r.key.ends_with(IVK_SUFFIX) {
            let names = r.args["names"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(Value::as_str);
            appended
                .entry(&r.origin)
                .or_default()
                .extend(names.filter(|n| !n.starts_with(['~', '&'])).map(str::to_string));
        }
    }
    let mut invoked: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut callers: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for r in history.records.iter().filter(|r| r.op == "async_invoke" && r.is_ok()) {
        let label = r.args["label"].as_str().unwrap_or_default().to_string();
        invoked.entry(&r.origin).or_default().insert(label);
        if r.key != GC_FUNCTION && !exempt.contains(&r.key) {
            let callee = format!(
                "{}:{}#{}#{}",
                r.args["workflowId"].as_str().unwrap_or_default(),
                r.key,
                r.args["step"],
                r.args["branch"]
            );
            callers.entry(callee).or_default().insert(&r.origin);
        }
    }
    for origin in invoked.keys().chain(appended.keys()).collect::<BTreeSet<_>>() {
        let empty = BTreeSet::new();
        let a = appended.get(origin).unwrap_or(&empty);
        let i = invoked.get(origin).unwrap_or(&empty);
        if origin != &super::cloud::CLIENT_ORIGIN && a != i {
            let missing: Vec<_> = i.difference(a).collect();
            let extra: Vec<_> = a.difference(i).collect();
            out.push((
                "b".into(),
                format!("invocation list of `{origin}` disagrees with its invocations: missing {missing:?}, extra {extra:?}"),
            ));
        }
    }
    for (callee, who) in callers {
        if who.len() > 1 {
            out.push((
                "c".into(),
                format!("`{callee}` invoked by {} distinct callers: {who:?}", who.len()),
            ));
        }
    }
    out
}

/// Full check of one run against the baseline's created outputs.
fn judge(
    schedule: &str,
    wid: &str,
    report: &RunReport,
    history: &History,
    exempt: &BTreeSet<String>,
    baseline: Option<&BTreeSet<String>>,
) -> Vec<Violation> {
    let v = |observable: &str, detail: String| Violation {
        schedule: schedule.to_string(),
        observable: observable.to_string(),
        detail,
    };
    let mut out: Vec<Violation> = check_observables(history, exempt)
        .into_iter()
        .map(|(o, d)| v(&o, d))
        .collect();
    if report.status(wid) != Some(RunState::Completed) {
        out.push(v("d", format!("run {wid} did not complete: {:?}", report.status(wid))));
    }
    if let Some(base) = baseline {
        let keys: BTreeSet<String> = created_outputs(history).into_keys().collect();
        if &keys != base {
            let missing: Vec<_> = base.difference(&keys).collect();
            let extra: Vec<_> = keys.difference(base).collect();
            out.push(v(
                "d",
                format!("created outputs differ from baseline: missing {missing:?}, extra {extra:?}"),
            ));
        }
    }
    let residue = report.residue(wid);
    if !residue.is_empty() {
        out.push(v("gc", format!("{} keys left: {residue:?}", residue.len())));
    }
    if let Err(e) = check_history(history) {
        out.push(v("linearizability", e.to_string()));
    }
    out
}

/// Crash schedules for every executed instance: each protocol crash point
/// on the first `n` attempts, `n` in `1..=budget`, plus GC crashes per
/// platform.
pub fn crash_schedules(instances: &[String], platforms: &[String], budget: u32) -> Vec<CrashRule> {
    let mut out = Vec::new();
    for id in instances {
        for point in CrashPoint::PROTOCOL {
            for attempts in 1..=budget {
                out.push(CrashRule {
                    function_id_pattern: id.clone(),
                    crash_point: point,
                    attempts,
                });
            }
        }
    }
    for p in platforms {
        for attempts in 1..=budget {
            out.push(CrashRule {
                function_id_pattern: format!("{GC_FUNCTION}.{p}_*"),
                crash_point: CrashPoint::GcMidSweep,
                attempts,
            });
        }
    }
    out
}

/// Runs the fault-free baseline, then one run per crash schedule, and
/// checks every run. Each run retries up to `budget` times per delivery.
pub fn enumerate_crash_points(workload: &Workload, budget: u32) -> Result<Verdict, SimError> {
    let mut w = workload.clone();
    w.topology = w.topology.with_retry_budget(budget);
    w.cfg.retry_budget = Some(budget);
    let exempt = if w.cfg.coordination == Coordination::ReadAfterWrite {
        w.aggregators()
    } else {
        BTreeSet::new()
    };
    let (base_report, base_history) = w.run(FaultPlan::none())?;
    let wid = base_report
        .runs
        .iter()
        .find(|r| !r.spawned)
        .map(|r| r.workflow_id.clone())
        .ok_or(SimError::NotDeployed)?;
    let mut verdict = Verdict {
        runs: 1,
        violations: judge("baseline", &wid, &base_report, &base_history, &exempt, None),
    };
    let baseline: BTreeSet<String> = created_outputs(&base_history).into_keys().collect();
    let instances: Vec<String> = base_report
        .executions
        .keys()
        .filter_map(|k| k.split_once('/').map(|(_, local)| local.to_string()))
        .collect();
    let platforms: Vec<String> = w.topology.platforms.iter().map(|p| p.id.clone()).collect();
    for rule in crash_schedules(&instances, &platforms, budget) {
        let schedule = format!("{} @ {} x{}", rule.function_id_pattern, rule.crash_point, rule.attempts);
        let plan = FaultPlan {
            crashes: vec![rule],
            ..FaultPlan::default()
        };
        let (report, history) = w.run(plan)?;
        verdict.runs += 1;
        verdict
            .violations
            .extend(judge(&schedule, &wid, &report, &history, &exempt, Some(&baseline)));
    }
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{compile_subgraphs, parse_workflow_def};
    use crate::runtime::ProtocolMutation;

    fn seq3() -> Workload {
        let text = r#"{"name":"seq","platforms":{"P1":{"payloadLimitBytes":262144},"P2":{"payloadLimitBytes":131072}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P2"},"C":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"sequence"},{"from":"B","to":"C","mode":"sequence"}],
            "entry":"A","terminal":"C"}"#;
        Workload {
            topology: Topology::two_platform(),
            set: compile_subgraphs(&parse_workflow_def(text).unwrap()).unwrap(),
            registry: Registry::new(),
            cfg: RuntimeConfig::default(),
            entry: "A".into(),
            input: b"in".to_vec(),
            seed: 1,
        }
    }

    #[test]
    fn seq3_budget1_runs_twelve_schedules_plus_gc() {
        let v = enumerate_crash_points(&seq3(), 1).unwrap();
        assert!(v.passed(), "{:#?}", v.violations);
        // Baseline, 3 instances x 4 points, one GC crash per platform.
        assert_eq!(v.runs, 1 + 12 + 2);
    }

    #[test]
    fn skipped_append_is_caught() {
        let mut w = seq3();
        w.cfg.mutation = Some(ProtocolMutation::SkipInvocationAppend);
        let v = enumerate_crash_points(&w, 1).unwrap();
        assert!(!v.passed());
        assert!(v.violations.iter().any(|x| x.observable == "b"));
    }
}
