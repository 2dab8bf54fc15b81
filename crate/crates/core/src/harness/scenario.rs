//! Scenario documents, their execution on the simulator, and the named
//! assertions evaluated over the results.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    compile_subgraphs, parse_workflow_def, InvokeMode, IrError, SubGraph, SubGraphSet, WorkflowDef, GC_FUNCTION,
};
use crate::naming::FunctionId;
use crate::runtime::{Coordination, Registry, RuntimeConfig};
use crate::sim::cloud::{RunReport, RunState};
use crate::sim::history::History;
use crate::sim::linearizability::check_history;
use crate::sim::oracle::{check_observables, enumerate_crash_points, Verdict, Workload};
use crate::sim::topology::PlatformSpec;
use crate::sim::{FaultPlan, OpCounts, SimCloud, SimError, Topology};

use super::fixtures;
use super::report::{AssertionVerdict, RepetitionReport, Report, REPORT_VERSION};

pub const FIXTURE_PREFIX: &str = "fixture:";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: invalid workflow: {}", .errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Workflow { path: String, errors: Vec<IrError> },
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A document given inline or by reference (`fixture:<name>` or a path
/// relative to the scenario file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DocRef<T> {
    Ref(String),
    Inline(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Submissions {
    pub count: u64,
    /// Ticks between consecutive submissions.
    pub interval: u64,
    pub input_bytes: usize,
}

impl Default for Submissions {
    fn default() -> Self {
        Self {
            count: 1,
            interval: 1,
            input_bytes: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assertion {
    /// Every submitted run completes.
    AllComplete,
    /// Fault-free per-instance W/R counts match the protocol cost model.
    OpCounts,
    /// Checkpointed observables hold and datastore histories linearize.
    ExactlyOnce,
    /// No key with a completed run's prefix survives.
    GcResidue,
    /// Versus a fault-free rerun, each failed-over edge costs exactly one
    /// client creation, one invocation and one cross-cloud transfer.
    FailoverExtraOps,
}

impl Assertion {
    pub fn name(self) -> &'static str {
        match self {
            Assertion::AllComplete => "all-complete",
            Assertion::OpCounts => "op-counts",
            Assertion::ExactlyOnce => "exactly-once",
            Assertion::GcResidue => "gc-residue",
            Assertion::FailoverExtraOps => "failover-extra-ops",
        }
    }
}

fn default_repetitions() -> u32 {
    1
}

fn default_max_events() -> u64 {
    10_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioSpec {
    pub name: String,
    pub workflow: DocRef<serde_json::Value>,
    #[serde(default)]
    pub topology: Option<DocRef<Topology>>,
    #[serde(default)]
    pub fault_plan: Option<DocRef<FaultPlan>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub submissions: Submissions,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &str, text: &str) -> Result<T, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl ScenarioSpec {
    /// Reads a scenario file, or a bundled scenario given as `fixture:<name>`.
    pub fn load(path: &str) -> Result<(Self, PathBuf), HarnessError> {
        if let Some(name) = path.strip_prefix(FIXTURE_PREFIX) {
            let v = fixtures::scenario(name).ok_or_else(|| HarnessError::UnknownFixture(name.to_string()))?;
            let spec = serde_json::from_value(v).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            return Ok((spec, PathBuf::from(".")));
        }
        let p = Path::new(path);
        let spec: Self = parse_json(path, &read(p)?)?;
        spec.validate()?;
        Ok((spec, p.parent().map(Path::to_path_buf).unwrap_or_default()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::Invalid("repetitions must be >= 1".into()));
        }
        if self.submissions.count == 0 {
            return Err(HarnessError::Invalid("submissions.count must be >= 1".into()));
        }
        Ok(())
    }
}

/// A scenario with every reference loaded and the workflow compiled.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub def: WorkflowDef,
    pub set: SubGraphSet,
    pub topology: Topology,
    pub plan: FaultPlan,
}

/// Loads and compiles a workflow given as `fixture:<name>`, a bare fixture
/// name, or a path.
pub fn load_workflow(reference: &str, base: &Path) -> Result<(WorkflowDef, SubGraphSet), HarnessError> {
    let name = reference.strip_prefix(FIXTURE_PREFIX).unwrap_or(reference);
    let (path, text) = match fixtures::workflow(name) {
        Some(v) if reference.starts_with(FIXTURE_PREFIX) || !base.join(reference).exists() => {
            (reference.to_string(), v.to_string())
        }
        _ if reference.starts_with(FIXTURE_PREFIX) => return Err(HarnessError::UnknownFixture(name.to_string())),
        _ => {
            let p = base.join(reference);
            (p.display().to_string(), read(&p)?)
        }
    };
    compile_text(&path, &text)
}

fn compile_text(path: &str, text: &str) -> Result<(WorkflowDef, SubGraphSet), HarnessError> {
    let wf = |errors| HarnessError::Workflow {
        path: path.to_string(),
        errors,
    };
    let def = parse_workflow_def(text).map_err(wf)?;
    let set = compile_subgraphs(&def).map_err(wf)?;
    Ok((def, set))
}

/// Topology matching a workflow's platform declarations.
pub fn topology_for(def: &WorkflowDef) -> Topology {
    Topology {
        platforms: def
            .platforms
            .iter()
            .map(|(id, p)| PlatformSpec::new(id, p.payload_limit_bytes))
            .collect(),
        latency: Default::default(),
    }
}

fn load_doc<T: serde::de::DeserializeOwned + Clone>(
    doc: &DocRef<T>,
    base: &Path,
    fixture: impl Fn(&str) -> Option<T>,
) -> Result<T, HarnessError> {
    match doc {
        DocRef::Inline(v) => Ok(v.clone()),
        DocRef::Ref(r) => match r.strip_prefix(FIXTURE_PREFIX) {
            Some(name) => fixture(name).ok_or_else(|| HarnessError::UnknownFixture(name.to_string())),
            None => {
                let p = base.join(r);
                parse_json(&p.display().to_string(), &read(&p)?)
            }
        },
    }
}

pub fn resolve(spec: &ScenarioSpec, base: &Path) -> Result<Resolved, HarnessError> {
    let (def, set) = match &spec.workflow {
        DocRef::Ref(r) => load_workflow(r, base)?,
        DocRef::Inline(v) => compile_text(&spec.name, &v.to_string())?,
    };
    let topology = match &spec.topology {
        Some(t) => load_doc(t, base, fixtures::topology)?,
        None => topology_for(&def),
    };
    let plan = match &spec.fault_plan {
        Some(p) => load_doc(p, base, |_| None)?,
        None => FaultPlan::none(),
    };
    Ok(Resolved {
        def,
        set,
        topology,
        plan,
    })
}

/// Deterministic input payload of `n` bytes.
pub fn input_bytes(n: usize) -> Vec<u8> {
    (0..n).map(|i| b'a' + (i % 26) as u8).collect()
}

/// One repetition's simulator results.
pub struct Execution {
    pub report: RunReport,
    pub history: History,
}

/// Runs the scenario's submissions once under `plan`.
pub fn execute(spec: &ScenarioSpec, r: &Resolved, plan: FaultPlan, seed: u64) -> Result<Execution, HarnessError> {
    let sim = SimCloud::configure_sim(r.topology.clone(), plan, seed)?;
    sim.deploy(r.set.clone(), Registry::new(), spec.runtime.clone())?;
    let input = input_bytes(spec.submissions.input_bytes);
    for i in 0..spec.submissions.count {
        sim.submit_at(i * spec.submissions.interval, &r.def.entry, input.clone());
    }
    let report = sim.run_until_quiescent(spec.max_events)?;
    Ok(Execution {
        report,
        history: sim.history(),
    })
}

/// Fault-free W and R of one instance under the protocol cost model:
/// output checkpoint 1W1R, invocation list create and read 1W1R, one append
/// per group of entries, 2W2R fan-in coordination, one read per inbound
/// data reference.
pub fn expected_wr(set: &SubGraphSet, sg: &SubGraph, id: &FunctionId, group_size: usize) -> Option<(u64, u64)> {
    let primitive = sg.primitive_targets().count() as u64;
    let entries = match sg.invoke.mode {
        InvokeMode::Sequence | InvokeMode::FanIn => 1,
        InvokeMode::Parallel | InvokeMode::Choice | InvokeMode::Cycle => primitive,
        InvokeMode::Map => sg.invoke.params.width.unwrap_or(1) as u64,
        InvokeMode::Terminal => 0,
        InvokeMode::ByBatch | InvokeMode::ByRedundant | InvokeMode::Gc => return None,
    } + sg.gc_targets().count() as u64;
    let appends = entries.div_ceil(group_size.max(1) as u64);
    let coord = if sg.invoke.mode == InvokeMode::FanIn { 2 } else { 0 };
    let inbound = set
        .values()
        .filter_map(|p| p.invoke.params.fan_in.as_ref())
        .filter(|f| f.aggregator == sg.this.name)
        .flat_map(|f| &f.groups)
        .find(|g| g.aggregator_step == id.step && g.aggregator_branch == id.branch)
        .map(|g| g.participants.len() as u64)
        .unwrap_or(0);
    Some((2 + appends + coord, 2 + coord + inbound))
}

fn assert_op_counts(spec: &ScenarioSpec, r: &Resolved, exec: &Execution) -> AssertionVerdict {
    let mut bad = Vec::new();
    let mut checked = 0;
    for (rendered, counts) in &exec.report.op_counts {
        let Ok(id) = FunctionId::parse(rendered) else { continue };
        let Some(sg) = r.set.get(&id.name) else { continue };
        let Some((w, rd)) = expected_wr(&r.set, sg, &id, spec.runtime.group_size) else {
            continue;
        };
        checked += 1;
        if counts.w() != w || counts.r() != rd {
            bad.push(format!(
                "{} metered {}W{}R, expected {w}W{rd}R",
                id.local(),
                counts.w(),
                counts.r()
            ));
        }
    }
    verdict(Assertion::OpCounts, bad, format!("{checked} instances match"))
}

fn verdict(a: Assertion, bad: Vec<String>, ok: String) -> AssertionVerdict {
    AssertionVerdict {
        name: a.name().to_string(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            ok
        } else {
            let more = if bad.len() > 5 {
                format!(" (+{} more)", bad.len() - 5)
            } else {
                String::new()
            };
            format!("{}{more}", bad[..bad.len().min(5)].join("; "))
        },
    }
}

fn submitted(report: &RunReport) -> impl Iterator<Item = &crate::sim::cloud::RunStatus> {
    report.runs.iter().filter(|r| !r.spawned)
}

fn assert_exactly_once(spec: &ScenarioSpec, r: &Resolved, exec: &Execution) -> AssertionVerdict {
    let exempt: BTreeSet<String> = if spec.runtime.coordination == Coordination::ReadAfterWrite {
        r.set
            .values()
            .filter_map(|sg| sg.invoke.params.fan_in.as_ref().map(|f| f.aggregator.clone()))
            .collect()
    } else {
        BTreeSet::new()
    };
    let mut bad: Vec<String> = check_observables(&exec.history, &exempt)
        .into_iter()
        .map(|(o, d)| format!("({o}) {d}"))
        .collect();
    match check_history(&exec.history) {
        Ok(s) => {
            if bad.is_empty() {
                return verdict(
                    Assertion::ExactlyOnce,
                    bad,
                    format!(
                        "{} records, {} objects linearizable",
                        exec.history.records.len(),
                        s.keys
                    ),
                );
            }
        }
        Err(e) => bad.push(e.to_string()),
    }
    verdict(Assertion::ExactlyOnce, bad, String::new())
}

fn assert_gc(exec: &Execution) -> AssertionVerdict {
    let mut bad = Vec::new();
    let mut n = 0;
    for run in exec.report.runs.iter().filter(|r| r.status == RunState::Completed) {
        n += 1;
        let residue = exec.report.residue(&run.workflow_id);
        if !residue.is_empty() {
            bad.push(format!("{} left {} keys", run.workflow_id, residue.len()));
        }
    }
    verdict(
        Assertion::GcResidue,
        bad,
        format!("{n} completed runs, 0 residual keys"),
    )
}

/// Totals of user-function instances; GC sweeps are excluded because a
/// platform's sweep is skipped for runs that never touched it.
fn function_totals(report: &RunReport) -> OpCounts {
    let mut t = OpCounts::default();
    for (id, c) in &report.op_counts {
        if FunctionId::parse(id).is_ok_and(|f| !f.name.starts_with(GC_FUNCTION)) {
            t += *c;
        }
    }
    t
}

fn assert_failover(
    spec: &ScenarioSpec,
    r: &Resolved,
    exec: &Execution,
    seed: u64,
) -> Result<AssertionVerdict, HarnessError> {
    let base = execute(spec, r, FaultPlan::none(), seed)?;
    let affected = exec
        .history
        .records
        .iter()
        .filter(|h| h.op == "async_invoke" && h.key != GC_FUNCTION && !h.is_ok())
        .count() as u64;
    let t = function_totals(&exec.report);
    let b = function_totals(&base.report);
    let expected = OpCounts {
        faas_creates: b.faas_creates + affected,
        invokes: b.invokes + affected,
        cross_cloud_transfers: b.cross_cloud_transfers + affected,
        ..b
    };
    let mut bad = Vec::new();
    if affected == 0 {
        bad.push("no edge was affected by the fault plan".to_string());
    }
    if t != expected {
        bad.push(format!(
            "{affected} affected edges, fault-free totals {b:?}, faulted totals {t:?}"
        ));
    }
    Ok(verdict(
        Assertion::FailoverExtraOps,
        bad,
        format!("{affected} affected edges, +1 client create, +1 invoke, +1 cross-cloud each"),
    ))
}

fn egress(report: &RunReport) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (id, c) in &report.op_counts {
        let name = FunctionId::parse(id).map(|f| f.name).unwrap_or_else(|_| id.clone());
        *out.entry(name).or_default() += c.cross_cloud_transfers;
    }
    out
}

/// Runs every repetition, evaluates the assertions, and builds the report.
pub fn run_scenario(spec: &ScenarioSpec, base: &Path) -> Result<Report, HarnessError> {
    spec.validate()?;
    let r = resolve(spec, base)?;
    let mut reps = Vec::new();
    let mut verdicts: Vec<AssertionVerdict> = Vec::new();
    for i in 0..spec.repetitions {
        let seed = spec.seed.wrapping_add(i as u64);
        let exec = execute(spec, &r, r.plan.clone(), seed)?;
        let mut assertions: Vec<Assertion> = spec.assertions.clone();
        assertions.sort();
        assertions.dedup();
        for a in assertions {
            let v = match a {
                Assertion::AllComplete => {
                    let bad: Vec<String> = submitted(&exec.report)
                        .filter(|s| s.status != RunState::Completed)
                        .map(|s| format!("{} {:?}", s.workflow_id, s.status))
                        .collect();
                    verdict(a, bad, format!("{} runs completed", submitted(&exec.report).count()))
                }
                Assertion::OpCounts => assert_op_counts(spec, &r, &exec),
                Assertion::ExactlyOnce => assert_exactly_once(spec, &r, &exec),
                Assertion::GcResidue => assert_gc(&exec),
                Assertion::FailoverExtraOps => assert_failover(spec, &r, &exec, seed)?,
            };
            let name = if spec.repetitions > 1 {
                format!("{}#{i}", v.name)
            } else {
                v.name.clone()
            };
            verdicts.push(AssertionVerdict { name, ..v });
        }
        let rep = &exec.report;
        let count = |s: RunState| rep.runs.iter().filter(|r| r.status == s).count();
        reps.push(RepetitionReport {
            seed,
            events: rep.events,
            final_tick: rep.final_tick,
            completed: count(RunState::Completed),
            failed: count(RunState::Failed),
            incomplete: count(RunState::Incomplete),
            runs: rep.runs.clone(),
            totals: rep.totals,
            op_counts: rep.op_counts.clone(),
            duplicate_executions: rep.duplicate_executions.clone(),
            crashes: rep.crashes,
            dead_letters: rep.dead_letters.clone(),
            egress: egress(rep),
        });
    }
    let placement = r
        .set
        .values()
        .filter_map(|sg| sg.data_placement().map(|p| (sg.this.name.clone(), p.to_string())))
        .collect();
    Ok(Report {
        version: REPORT_VERSION,
        scenario: spec.name.clone(),
        workflow: r.def.name.clone(),
        seed: spec.seed,
        placement,
        passed: verdicts.iter().all(|v| v.passed),
        repetitions: reps,
        assertions: verdicts,
    })
}

/// Exhaustive crash enumeration over a workflow with `budget` retries.
pub fn verify_exactly_once(
    reference: &str,
    base: &Path,
    budget: u32,
    seed: u64,
    cfg: RuntimeConfig,
) -> Result<Verdict, HarnessError> {
    let (def, set) = load_workflow(reference, base)?;
    let workload = Workload {
        topology: topology_for(&def),
        set,
        registry: Registry::new(),
        cfg,
        entry: def.entry.clone(),
        input: input_bytes(1024),
        seed,
    };
    Ok(enumerate_crash_points(&workload, budget)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str) -> Report {
        let (spec, base) = ScenarioSpec::load(&format!("{FIXTURE_PREFIX}{name}")).unwrap();
        run_scenario(&spec, &base).unwrap()
    }

    #[test]
    fn bundled_scenarios_pass() {
        for name in fixtures::SCENARIO_FIXTURES {
            let r = run(name);
            assert!(r.passed, "{name}:\n{}", r.to_table());
        }
    }

    #[test]
    fn scenario_parse_errors_carry_positions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        std::fs::write(&p, "{\n  \"name\": \"x\",\n  \"workflow\": }").unwrap();
        match ScenarioSpec::load(p.to_str().unwrap()) {
            Err(HarnessError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 15)),
            other => panic!("{other:?}"),
        }
    }
}
