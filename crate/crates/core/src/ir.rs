//! Workflow description and its compilation into per-function sub-graphs.
//!
//! A workflow document is JSON:
//!
//! ```json
//! {
//!   "name": "diamond",
//!   "platforms": {"p1": {"payloadLimitBytes": 262144}, "p2": {"payloadLimitBytes": 131072}},
//!   "functions": {
//!     "A": {"platform": "p1", "failover": [], "memoryClass": "small"},
//!     "B": {"platform": "p2", "transfer": {"transferByDs": true, "ds": "object", "placement": "auto(majority)"}}
//!   },
//!   "edges": [{"from": "A", "to": "B", "mode": "parallel", "params": {}}],
//!   "entry": "A",
//!   "terminal": "D"
//! }
//! ```
//!
//! Edge modes: `sequence`, `parallel`, `map` (`width`), `fanin` (optional
//! `arity`), `choice` (`predicate`, the last alternative has none), `cycle`
//! (`bound`, optional `predicate`), `batch` (`batchSize`), `redundant`
//! (`count`).
//!
//! The runtime consumes [`SubGraph`]s only. [`compile_subgraphs`] derives them
//! from a global [`WorkflowDef`], but hand-written sub-graph sets are equally
//! valid input once they pass [`validate_subgraph_set`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::naming::{self, pop_and_merge, push_branch, render_local, BranchStack};
use crate::shim::DsKind;

/// Name under which every platform deploys its garbage collector.
pub const GC_FUNCTION: &str = "gc";

/// Upper bound on statically expanded instances per workflow region.
pub const MAX_INSTANCES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlatformDecl {
    pub payload_limit_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FunctionDecl {
    pub name: String,
    pub platform: String,
    #[serde(default)]
    pub failover: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Sequence,
    Parallel,
    Map,
    Fanin,
    Choice,
    Cycle,
    Batch,
    Redundant,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EdgeParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub mode: EdgeMode,
    #[serde(default)]
    pub params: EdgeParams,
}

/// Where intermediate data of a sub-graph is stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Placement {
    Platform(String),
    /// Resolved to the most frequent platform of the sub-graph.
    AutoMajority,
}

pub const AUTO_MAJORITY: &str = "auto(majority)";

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Platform(p) => f.write_str(p),
            Placement::AutoMajority => f.write_str(AUTO_MAJORITY),
        }
    }
}

impl Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == AUTO_MAJORITY {
            Ok(Placement::AutoMajority)
        } else if s.is_empty() {
            Err(serde::de::Error::custom("empty placement"))
        } else {
            Ok(Placement::Platform(s))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferPrimitive {
    #[serde(default)]
    pub transfer_by_ds: bool,
    #[serde(default = "default_ds")]
    pub ds: DsKind,
    #[serde(default = "default_placement")]
    pub placement: Placement,
}

fn default_ds() -> DsKind {
    DsKind::Object
}

fn default_placement() -> Placement {
    Placement::AutoMajority
}

impl Default for TransferPrimitive {
    fn default() -> Self {
        Self {
            transfer_by_ds: false,
            ds: default_ds(),
            placement: default_placement(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowDef {
    pub name: String,
    pub platforms: BTreeMap<String, PlatformDecl>,
    pub functions: Vec<FunctionDecl>,
    pub transfers: BTreeMap<String, TransferPrimitive>,
    pub edges: Vec<Edge>,
    pub entry: String,
    pub terminal: String,
}

impl WorkflowDef {
    pub fn function(&self, name: &str) -> Option<&FunctionDecl> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn transfer(&self, name: &str) -> TransferPrimitive {
        self.transfers.get(name).cloned().unwrap_or_default()
    }

    pub fn payload_limit(&self, platform: &str) -> u64 {
        self.platforms.get(platform).map(|p| p.payload_limit_bytes).unwrap_or(0)
    }

    pub fn out_edges<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == name)
    }

    pub fn in_edges<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to == name)
    }

    /// Serializes back to the workflow document schema.
    pub fn to_json(&self) -> String {
        let doc = RawDoc {
            name: self.name.clone(),
            platforms: self.platforms.clone(),
            functions: self
                .functions
                .iter()
                .map(|f| {
                    (
                        f.name.clone(),
                        RawFunction {
                            platform: f.platform.clone(),
                            failover: f.failover.clone(),
                            memory_class: f.memory_class.clone(),
                            transfer: self.transfers.get(&f.name).cloned(),
                        },
                    )
                })
                .collect(),
            edges: self.edges.clone(),
            entry: self.entry.clone(),
            terminal: self.terminal.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("workflow serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawFunction {
    platform: String,
    #[serde(default)]
    failover: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    memory_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transfer: Option<TransferPrimitive>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawDoc {
    name: String,
    platforms: BTreeMap<String, PlatformDecl>,
    functions: BTreeMap<String, RawFunction>,
    #[serde(default)]
    edges: Vec<Edge>,
    entry: String,
    terminal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum IrError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    SyntaxError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("function `{function}` references unknown platform `{platform}`")]
    UnknownPlatform { function: String, platform: String },
    #[error("edge {from} -> {to} references an undeclared function")]
    DanglingEdge { from: String, to: String },
    #[error("multiple entry functions: {0:?}")]
    MultipleEntries(Vec<String>),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("invalid function name `{0}`")]
    InvalidName(String),
    #[error("invalid platform declaration `{0}`")]
    InvalidPlatform(String),
    #[error("failover list of `{0}` contains its primary platform")]
    FailoverIncludesPrimary(String),
    #[error("edge {from} -> {to}: {message}")]
    InvalidParam { from: String, to: String, message: String },
    #[error("function `{0}` mixes incompatible outgoing edge modes")]
    MixedModes(String),
    #[error("fan-in into `{aggregator}` declares arity {declared} but has {actual} participants")]
    FanInArityMismatch {
        aggregator: String,
        declared: u32,
        actual: u32,
    },
    #[error("cycle through {0:?} without a cycle primitive")]
    CyclicWithoutCyclePrimitive(Vec<String>),
    #[error("cycle edge {from} -> {to} does not close a loop")]
    InvalidCycle { from: String, to: String },
    #[error("loop bodies of `{0}` and `{1}` overlap")]
    NestedCycle(String, String),
    #[error("terminal `{terminal}` is not the single sink reachable from `{root}` (sinks: {sinks:?})")]
    TerminalMismatch {
        root: String,
        terminal: String,
        sinks: Vec<String>,
    },
    #[error("fan-in into `{0}` has participants outside any branch")]
    FanInWithoutBranch(String),
    #[error("fan-in into `{0}` depends on a conditional branch")]
    ConditionalFanIn(String),
    #[error("terminal `{0}` can run more than once per workflow instance")]
    MultipleTerminalInstances(String),
    #[error("workflow expands to more than {MAX_INSTANCES} instances")]
    TooManyInstances,
    #[error("sub-graph `{0}` is referenced but missing")]
    MissingSubGraph(String),
    #[error("participants of fan-in into `{0}` disagree on the participant list")]
    InconsistentFanIn(String),
    #[error("sub-graph `{function}`: {message}")]
    InvalidSubGraph { function: String, message: String },
}

/// Parses and validates a workflow document. Never panics on malformed
/// input; all problems are returned as diagnostics.
pub fn parse_workflow_def(text: &str) -> Result<WorkflowDef, Vec<IrError>> {
    let raw: RawDoc = serde_json::from_str(text).map_err(|e| {
        vec![IrError::SyntaxError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }]
    })?;
    let mut functions = Vec::new();
    let mut transfers = BTreeMap::new();
    for (name, f) in raw.functions {
        if let Some(t) = f.transfer {
            transfers.insert(name.clone(), t);
        }
        functions.push(FunctionDecl {
            name,
            platform: f.platform,
            failover: f.failover,
            memory_class: f.memory_class,
        });
    }
    let def = WorkflowDef {
        name: raw.name,
        platforms: raw.platforms,
        functions,
        transfers,
        edges: raw.edges,
        entry: raw.entry,
        terminal: raw.terminal,
    };
    let errors = validate_def(&def);
    if errors.is_empty() {
        Ok(def)
    } else {
        Err(errors)
    }
}

/// Structural checks that do not need graph expansion.
pub fn validate_def(def: &WorkflowDef) -> Vec<IrError> {
    let mut errs = Vec::new();
    for (id, p) in &def.platforms {
        if id.is_empty() || id.contains('/') || p.payload_limit_bytes == 0 {
            errs.push(IrError::InvalidPlatform(id.clone()));
        }
    }
    let names: BTreeSet<&str> = def.functions.iter().map(|f| f.name.as_str()).collect();
    for f in &def.functions {
        if !naming::is_valid_name(&f.name) || f.name == GC_FUNCTION {
            errs.push(IrError::InvalidName(f.name.clone()));
        }
        for p in std::iter::once(&f.platform).chain(&f.failover) {
            if !def.platforms.contains_key(p) {
                errs.push(IrError::UnknownPlatform {
                    function: f.name.clone(),
                    platform: p.clone(),
                });
            }
        }
        if f.failover.contains(&f.platform) {
            errs.push(IrError::FailoverIncludesPrimary(f.name.clone()));
        }
        if let Some(TransferPrimitive {
            placement: Placement::Platform(p),
            ..
        }) = def.transfers.get(&f.name)
        {
            if !def.platforms.contains_key(p) {
                errs.push(IrError::UnknownPlatform {
                    function: f.name.clone(),
                    platform: p.clone(),
                });
            }
        }
    }
    for name in [&def.entry, &def.terminal] {
        if !names.contains(name.as_str()) {
            errs.push(IrError::UnknownFunction(name.clone()));
        }
    }
    for e in &def.edges {
        if !names.contains(e.from.as_str()) || !names.contains(e.to.as_str()) {
            errs.push(IrError::DanglingEdge {
                from: e.from.clone(),
                to: e.to.clone(),
            });
            continue;
        }
        if let Some(msg) = param_problem(e) {
            errs.push(IrError::InvalidParam {
                from: e.from.clone(),
                to: e.to.clone(),
                message: msg,
            });
        }
    }
    for f in &def.functions {
        if let Err(e) = node_mode(def, &f.name) {
            errs.push(e);
        }
        if names.contains(f.name.as_str()) && errs.is_empty() {
            errs.extend(node_checks(def, &f.name));
        }
    }
    // roots other than the entry; batch targets start detached regions
    let mut roots: Vec<String> = def
        .functions
        .iter()
        .filter(|f| f.name != def.entry && def.in_edges(&f.name).next().is_none())
        .map(|f| f.name.clone())
        .collect();
    if !roots.is_empty() {
        roots.insert(0, def.entry.clone());
        errs.push(IrError::MultipleEntries(roots));
    }
    if names.contains(def.entry.as_str()) && def.in_edges(&def.entry).any(|e| e.mode != EdgeMode::Cycle) {
        errs.push(IrError::MultipleEntries(vec![def.entry.clone()]));
    }
    errs
}

fn param_problem(e: &Edge) -> Option<String> {
    let p = &e.params;
    match e.mode {
        EdgeMode::Map if p.width.unwrap_or(0) < 1 => Some("map width must be >= 1".into()),
        EdgeMode::Batch if p.batch_size.unwrap_or(0) < 1 => Some("batch size must be >= 1".into()),
        EdgeMode::Redundant if p.count.unwrap_or(0) < 2 => Some("redundancy count must be >= 2".into()),
        EdgeMode::Cycle if p.bound.unwrap_or(0) < 1 => Some("cycle bound must be >= 1".into()),
        EdgeMode::Fanin if p.arity == Some(0) => Some("fan-in arity must be >= 1".into()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InvokeMode {
    Sequence,
    Parallel,
    Map,
    FanIn,
    Choice,
    Cycle,
    ByBatch,
    ByRedundant,
    /// End of a workflow instance; the only successors are GC functions.
    Terminal,
    /// Marks GC trigger entries in `nextFuncs` and GC envelopes.
    Gc,
}

/// Resolves the outgoing primitive of a function from its edges.
fn node_mode(def: &WorkflowDef, name: &str) -> Result<InvokeMode, IrError> {
    let outs: Vec<&Edge> = def.out_edges(name).collect();
    let count = |m: EdgeMode| outs.iter().filter(|e| e.mode == m).count();
    let mixed = || IrError::MixedModes(name.to_string());
    if outs.is_empty() {
        return Ok(InvokeMode::Terminal);
    }
    let first = outs[0].mode;
    let uniform = outs.iter().all(|e| e.mode == first);
    match first {
        _ if count(EdgeMode::Cycle) > 0 => {
            if count(EdgeMode::Cycle) == 1 && count(EdgeMode::Sequence) == 1 && outs.len() == 2 {
                Ok(InvokeMode::Cycle)
            } else {
                Err(mixed())
            }
        }
        EdgeMode::Sequence if outs.len() == 1 => Ok(InvokeMode::Sequence),
        EdgeMode::Parallel if uniform => Ok(InvokeMode::Parallel),
        EdgeMode::Choice if uniform => Ok(InvokeMode::Choice),
        EdgeMode::Map if outs.len() == 1 => Ok(InvokeMode::Map),
        EdgeMode::Fanin if outs.len() == 1 => Ok(InvokeMode::FanIn),
        EdgeMode::Batch if outs.len() == 1 => Ok(InvokeMode::ByBatch),
        EdgeMode::Redundant if outs.len() == 1 => Ok(InvokeMode::ByRedundant),
        _ => Err(mixed()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Participant {
    pub name: String,
    pub step: u32,
    pub branch: BranchStack,
}

impl Participant {
    pub fn local(&self) -> String {
        render_local(&self.name, self.step, &self.branch)
    }
}

/// One fan-in coordination point: the ordered participants (bitmap order)
/// and the aggregator instance they trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FanInGroup {
    pub participants: Vec<Participant>,
    pub aggregator_step: u32,
    pub aggregator_branch: BranchStack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FanInSpec {
    pub aggregator: String,
    /// Platform hosting the bitmap and the participants' output data.
    pub placement: String,
    pub groups: Vec<FanInGroup>,
}

impl FanInSpec {
    /// Finds the group and bitmap index of a participant instance.
    pub fn locate(&self, name: &str, step: u32, branch: &BranchStack) -> Option<(&FanInGroup, usize)> {
        self.groups.iter().find_map(|g| {
            g.participants
                .iter()
                .position(|p| p.name == name && p.step == step && &p.branch == branch)
                .map(|i| (g, i))
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvokeParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan_in: Option<FanInSpec>,
    /// Choice: one entry per target, `None` for the default alternative.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<u32>,
    /// Cycle: continue looping only while this predicate holds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collab_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvokePrimitive {
    pub mode: InvokeMode,
    pub targets: Vec<String>,
    #[serde(default)]
    pub params: InvokeParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NextFunctionInfo {
    pub name: String,
    pub platform: String,
    pub invoke_mode: InvokeMode,
    #[serde(default)]
    pub failover: Vec<String>,
    pub payload_limit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubGraph {
    #[serde(rename = "self")]
    pub this: FunctionDecl,
    pub invoke: InvokePrimitive,
    pub transfer: TransferPrimitive,
    /// Successors in invocation order. For terminals this ends with one GC
    /// trigger per platform.
    pub next_funcs: Vec<NextFunctionInfo>,
    #[serde(default)]
    pub terminal: bool,
}

impl SubGraph {
    /// Successors named by the invocation primitive (GC triggers excluded).
    pub fn primitive_targets(&self) -> impl Iterator<Item = &NextFunctionInfo> {
        self.next_funcs.iter().filter(|n| n.invoke_mode != InvokeMode::Gc)
    }

    pub fn gc_targets(&self) -> impl Iterator<Item = &NextFunctionInfo> {
        self.next_funcs.iter().filter(|n| n.invoke_mode == InvokeMode::Gc)
    }

    /// Platform holding this function's output checkpoint when it transfers
    /// through a datastore. `None` means co-located with the executing platform.
    pub fn data_placement(&self) -> Option<&str> {
        match (&self.transfer.transfer_by_ds, &self.transfer.placement) {
            (true, Placement::Platform(p)) => Some(p),
            _ => None,
        }
    }
}

pub type SubGraphSet = BTreeMap<String, SubGraph>;

/// Majority rule: the most frequent platform among `self_platform` and
/// `others`; ties go to `self_platform`, then to the smallest id.
pub fn majority_platform(self_platform: &str, others: &[&str]) -> String {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    *tally.entry(self_platform).or_default() += 1;
    for p in others {
        *tally.entry(p).or_default() += 1;
    }
    let best = *tally.values().max().expect("non-empty");
    if tally[self_platform] == best {
        return self_platform.to_string();
    }
    tally
        .into_iter()
        .find(|(_, c)| *c == best)
        .map(|(p, _)| p.to_string())
        .expect("non-empty")
}

type InstKey = (String, u32, BranchStack, u32);
type Cond = BTreeSet<(String, u32)>;

/// Topological order ignoring cycle back edges.
pub fn topo_order(def: &WorkflowDef) -> Result<Vec<String>, IrError> {
    let mut indeg: BTreeMap<&str, usize> = def.functions.iter().map(|f| (f.name.as_str(), 0)).collect();
    for e in def.edges.iter().filter(|e| e.mode != EdgeMode::Cycle) {
        if let Some(d) = indeg.get_mut(e.to.as_str()) {
            *d += 1;
        }
    }
    let mut ready: VecDeque<&str> = def
        .functions
        .iter()
        .map(|f| f.name.as_str())
        .filter(|n| indeg[n] == 0)
        .collect();
    let mut order = Vec::new();
    while let Some(n) = ready.pop_front() {
        order.push(n.to_string());
        for e in def.out_edges(n).filter(|e| e.mode != EdgeMode::Cycle) {
            if let Some(d) = indeg.get_mut(e.to.as_str()) {
                *d -= 1;
                if *d == 0 {
                    ready.push_back(e.to.as_str());
                }
            }
        }
    }
    if order.len() != def.functions.len() {
        let stuck = indeg
            .into_keys()
            .filter(|n| !order.iter().any(|o| o == n))
            .map(str::to_string)
            .collect();
        return Err(IrError::CyclicWithoutCyclePrimitive(stuck));
    }
    Ok(order)
}

fn reachable(def: &WorkflowDef, from: &str, follow: impl Fn(&Edge) -> bool) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(n) = stack.pop() {
        if !seen.insert(n.clone()) {
            continue;
        }
        for e in def.out_edges(&n).filter(|e| follow(e)) {
            stack.push(e.to.clone());
        }
    }
    seen
}

fn in_region(e: &Edge) -> bool {
    !matches!(e.mode, EdgeMode::Batch | EdgeMode::Cycle)
}

/// Every cycle edge must close a loop, and loop bodies must be disjoint.
fn check_cycles(def: &WorkflowDef) -> Result<(), IrError> {
    let mut bodies: Vec<(String, BTreeSet<String>)> = Vec::new();
    for e in def.edges.iter().filter(|e| e.mode == EdgeMode::Cycle) {
        let from_head = reachable(def, &e.to, in_region);
        if !from_head.contains(&e.from) {
            return Err(IrError::InvalidCycle {
                from: e.from.clone(),
                to: e.to.clone(),
            });
        }
        let body: BTreeSet<String> = from_head
            .into_iter()
            .filter(|n| reachable(def, n, in_region).contains(&e.from))
            .collect();
        for (other, other_body) in &bodies {
            if !body.is_disjoint(other_body) {
                return Err(IrError::NestedCycle(other.clone(), e.to.clone()));
            }
        }
        bodies.push((e.to.clone(), body));
    }
    Ok(())
}

/// Roots of independently instantiated regions: the entry, then every batch
/// target in edge order.
pub fn region_roots(def: &WorkflowDef) -> Vec<String> {
    let mut roots = vec![def.entry.clone()];
    for e in def.edges.iter().filter(|e| e.mode == EdgeMode::Batch) {
        if !roots.contains(&e.to) {
            roots.push(e.to.clone());
        }
    }
    roots
}

/// Functions of a region without outgoing edges inside it.
fn region_sinks(def: &WorkflowDef, root: &str) -> Vec<String> {
    reachable(def, root, in_region)
        .into_iter()
        .filter(|n| def.out_edges(n).all(|e| e.mode == EdgeMode::Batch))
        .collect()
}

fn conflicts(a: &Cond, b: &Cond) -> bool {
    a.iter()
        .any(|(d, alt)| b.iter().any(|(d2, alt2)| d == d2 && alt != alt2))
}

/// Statically expanded instance of a function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Instance {
    pub name: String,
    pub step: u32,
    pub branch: BranchStack,
    pub iteration: u32,
    /// Branch decisions `(decider local id, alternative)` this instance needs.
    pub conditions: Cond,
}

impl Instance {
    pub fn local(&self) -> String {
        render_local(&self.name, self.step, &self.branch)
    }
}

/// Every instance a region can produce, and its fan-in groups by aggregator.
#[derive(Debug, Clone, Default)]
pub struct Expansion {
    pub root: String,
    pub instances: Vec<Instance>,
    pub fan_in: BTreeMap<String, Vec<FanInGroup>>,
}

/// Fan-in group awaiting its aggregator: group, step, merged stack, condition.
/// In-edge index and participant instance.
type Member = (usize, InstKey);

type PendingGroup = (FanInGroup, u32, Vec<u32>, Cond);

struct Expander<'a> {
    def: &'a WorkflowDef,
    order: Vec<String>,
    known: BTreeMap<InstKey, Cond>,
    expanded: BTreeSet<InstKey>,
    /// aggregator -> (in-edge index, participant instance)
    pools: BTreeMap<String, BTreeSet<(usize, InstKey)>>,
    grouped: BTreeSet<InstKey>,
    fan_in: BTreeMap<String, Vec<PendingGroup>>,
}

impl<'a> Expander<'a> {
    fn add(&mut self, key: InstKey, cond: Cond) -> Result<(), IrError> {
        match self.known.get_mut(&key) {
            Some(existing) => {
                let merged: Cond = existing.intersection(&cond).cloned().collect();
                if merged != *existing {
                    *existing = merged;
                    self.expanded.remove(&key);
                }
            }
            None => {
                if self.known.len() >= MAX_INSTANCES {
                    return Err(IrError::TooManyInstances);
                }
                self.known.insert(key, cond);
            }
        }
        Ok(())
    }

    fn pass(&mut self) -> Result<bool, IrError> {
        let mut progressed = false;
        for fname in self.order.clone() {
            let pending: Vec<(InstKey, Cond)> = self
                .known
                .range((fname.clone(), 0, BranchStack::new(), 0)..)
                .take_while(|(k, _)| k.0 == fname)
                .filter(|(k, _)| !self.expanded.contains(*k))
                .map(|(k, c)| (k.clone(), c.clone()))
                .collect();
            for (key, cond) in pending {
                self.expanded.insert(key.clone());
                progressed = true;
                self.successors(&fname, key, cond)?;
            }
        }
        Ok(progressed)
    }

    fn successors(&mut self, fname: &str, key: InstKey, cond: Cond) -> Result<(), IrError> {
        let def = self.def;
        let (_, step, branch, it) = key.clone();
        let local = render_local(fname, step, &branch);
        let outs: Vec<&Edge> = def.out_edges(fname).collect();
        match node_mode(def, fname)? {
            InvokeMode::Sequence => self.add((outs[0].to.clone(), step + 1, branch, it), cond)?,
            InvokeMode::Parallel => {
                for (i, e) in outs.iter().enumerate() {
                    let b = push_branch(&branch, i as u32);
                    self.add((e.to.clone(), step + 1, b, it), cond.clone())?;
                }
            }
            InvokeMode::Map => {
                for i in 0..outs[0].params.width.unwrap_or(1) {
                    let b = push_branch(&branch, i);
                    self.add((outs[0].to.clone(), step + 1, b, it), cond.clone())?;
                }
            }
            InvokeMode::Choice => {
                for (i, e) in outs.iter().enumerate() {
                    let mut c = cond.clone();
                    c.insert((local.clone(), i as u32));
                    self.add((e.to.clone(), step + 1, branch.clone(), it), c)?;
                }
            }
            InvokeMode::Cycle => {
                let (head, exit, bound, predicate) = cycle_parts(def, fname);
                if it + 1 >= bound {
                    self.add((exit, step + 1, branch, 0), cond)?;
                } else if predicate.is_none() {
                    self.add((head, step + 1, branch, it + 1), cond)?;
                } else {
                    let mut again = cond.clone();
                    again.insert((local.clone(), 0));
                    let mut done = cond;
                    done.insert((local, 1));
                    self.add((head, step + 1, branch.clone(), it + 1), again)?;
                    self.add((exit, step + 1, branch, 0), done)?;
                }
            }
            InvokeMode::ByRedundant => {
                let popped = branch.popped().map_err(|_| IrError::InvalidParam {
                    from: fname.to_string(),
                    to: outs[0].to.clone(),
                    message: "redundant replicas must come from a map".into(),
                })?;
                self.add((outs[0].to.clone(), step + 1, popped, it), cond)?;
            }
            InvokeMode::FanIn => {
                let agg = outs[0].to.clone();
                let idx = def.in_edges(&agg).position(|e| e.from == fname).expect("edge");
                if !self.grouped.contains(&key) {
                    self.pools.entry(agg).or_default().insert((idx, key));
                }
            }
            InvokeMode::ByBatch | InvokeMode::Terminal | InvokeMode::Gc => {}
        }
        Ok(())
    }

    /// Forms the groups of the first aggregator (topologically) with
    /// ungrouped participants. Returns false when nothing was pending.
    fn form_groups(&mut self) -> Result<bool, IrError> {
        let Some(agg) = self
            .order
            .iter()
            .find(|a| {
                self.pools
                    .get(*a)
                    .is_some_and(|p| p.iter().any(|(_, k)| !self.grouped.contains(k)))
            })
            .cloned()
        else {
            return Ok(false);
        };
        let entries: Vec<(usize, InstKey)> = self.pools[&agg]
            .iter()
            .filter(|(_, k)| !self.grouped.contains(k))
            .cloned()
            .collect();
        let mut min_depth: BTreeMap<u32, usize> = BTreeMap::new();
        for (_, k) in &entries {
            let d = min_depth.entry(k.3).or_insert(usize::MAX);
            *d = (*d).min(k.2.depth());
        }
        let mut buckets: BTreeMap<(u32, Vec<u32>, Cond), Vec<Member>> = BTreeMap::new();
        for (idx, k) in entries {
            let depth = min_depth[&k.3];
            if depth == 0 {
                return Err(IrError::FanInWithoutBranch(agg));
            }
            let prefix = k.2.levels()[..depth - 1].to_vec();
            let cond = self.known[&k].clone();
            buckets.entry((k.3, prefix, cond)).or_default().push((idx, k));
        }
        for ((iteration, prefix, cond), mut members) in buckets {
            let existing = self.fan_in.entry(agg.clone()).or_default();
            if existing
                .iter()
                .any(|(_, it, p, c)| *it == iteration && *p == prefix && !conflicts(c, &cond))
            {
                return Err(IrError::ConditionalFanIn(agg));
            }
            members.sort_by(|a, b| (a.0, &a.1 .2, a.1 .1, &a.1 .0).cmp(&(b.0, &b.1 .2, b.1 .1, &b.1 .0)));
            let stacks: Vec<BranchStack> = members.iter().map(|(_, k)| k.2.clone()).collect();
            let branch = pop_and_merge(&stacks).map_err(|_| IrError::FanInWithoutBranch(agg.clone()))?;
            let step = members.iter().map(|(_, k)| k.1).max().expect("non-empty") + 1;
            let group = FanInGroup {
                participants: members
                    .iter()
                    .map(|(_, k)| Participant {
                        name: k.0.clone(),
                        step: k.1,
                        branch: k.2.clone(),
                    })
                    .collect(),
                aggregator_step: step,
                aggregator_branch: branch.clone(),
            };
            for (_, k) in &members {
                self.grouped.insert(k.clone());
            }
            existing.push((group, iteration, prefix, cond.clone()));
            self.add((agg.clone(), step, branch, iteration), cond)?;
        }
        Ok(true)
    }
}

fn cycle_parts(def: &WorkflowDef, name: &str) -> (String, String, u32, Option<String>) {
    let back = def
        .out_edges(name)
        .find(|e| e.mode == EdgeMode::Cycle)
        .expect("cycle edge");
    let exit = def
        .out_edges(name)
        .find(|e| e.mode == EdgeMode::Sequence)
        .expect("exit edge");
    (
        back.to.clone(),
        exit.to.clone(),
        back.params.bound.unwrap_or(1),
        back.params.predicate.clone(),
    )
}

/// Expands the region rooted at `root`, mirroring the runtime's step, branch
/// and iteration rules.
pub fn expand(def: &WorkflowDef, root: &str) -> Result<Expansion, IrError> {
    let mut x = Expander {
        def,
        order: topo_order(def)?,
        known: BTreeMap::new(),
        expanded: BTreeSet::new(),
        pools: BTreeMap::new(),
        grouped: BTreeSet::new(),
        fan_in: BTreeMap::new(),
    };
    x.add((root.to_string(), 0, BranchStack::new(), 0), Cond::new())?;
    loop {
        while x.pass()? {}
        if !x.form_groups()? {
            break;
        }
    }
    let instances = x
        .known
        .into_iter()
        .map(|((name, step, branch, iteration), conditions)| Instance {
            name,
            step,
            branch,
            iteration,
            conditions,
        })
        .collect();
    let fan_in = x
        .fan_in
        .into_iter()
        .map(|(agg, gs)| (agg, gs.into_iter().map(|g| g.0).collect()))
        .collect();
    Ok(Expansion {
        root: root.to_string(),
        instances,
        fan_in,
    })
}

/// Expands every region and checks the properties that need instances.
pub fn instantiate(def: &WorkflowDef) -> Result<Vec<Expansion>, IrError> {
    topo_order(def)?;
    check_cycles(def)?;
    let mut out = Vec::new();
    for root in region_roots(def) {
        let sinks = region_sinks(def, &root);
        let expected_terminal = if root == def.entry { Some(&def.terminal) } else { None };
        let ok = sinks.len() == 1 && expected_terminal.is_none_or(|t| &sinks[0] == t);
        if !ok {
            return Err(IrError::TerminalMismatch {
                root,
                terminal: def.terminal.clone(),
                sinks,
            });
        }
        let exp = expand(def, &root)?;
        let terms: Vec<&Instance> = exp.instances.iter().filter(|i| i.name == sinks[0]).collect();
        for (i, a) in terms.iter().enumerate() {
            if terms[i + 1..].iter().any(|b| !conflicts(&a.conditions, &b.conditions)) {
                return Err(IrError::MultipleTerminalInstances(sinks[0].clone()));
            }
        }
        out.push(exp);
    }
    let mut seen = BTreeSet::new();
    for exp in &out {
        let names: BTreeSet<&str> = exp.instances.iter().map(|i| i.name.as_str()).collect();
        for n in names {
            if !seen.insert(n.to_string()) {
                return Err(IrError::InvalidParam {
                    from: exp.root.clone(),
                    to: n.to_string(),
                    message: "function shared between batch regions".into(),
                });
            }
        }
    }
    Ok(out)
}

fn node_checks(def: &WorkflowDef, name: &str) -> Vec<IrError> {
    let mut errs = Vec::new();
    let ins: Vec<&Edge> = def.in_edges(name).collect();
    let fanin = ins.iter().filter(|e| e.mode == EdgeMode::Fanin).count();
    if fanin > 0 && fanin != ins.len() {
        errs.push(IrError::MixedModes(name.to_string()));
    }
    if let Some(arity) = ins.iter().find_map(|e| e.params.arity) {
        if ins.iter().any(|e| e.params.arity.is_some_and(|a| a != arity)) {
            errs.push(IrError::FanInArityMismatch {
                aggregator: name.to_string(),
                declared: arity,
                actual: fanin as u32,
            });
        }
    }
    let outs: Vec<&Edge> = def.out_edges(name).collect();
    if outs.first().is_some_and(|e| e.mode == EdgeMode::Choice) {
        let last = outs.len() - 1;
        for (i, e) in outs.iter().enumerate() {
            if (i == last) != e.params.predicate.is_none() {
                errs.push(IrError::InvalidParam {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    message: "choice needs a predicate on every alternative but the last".into(),
                });
            }
        }
    }
    for e in outs.iter().filter(|e| e.mode == EdgeMode::Redundant) {
        let feeding: Vec<&Edge> = def.in_edges(name).collect();
        let ok = feeding.len() == 1 && feeding[0].mode == EdgeMode::Map && feeding[0].params.width == e.params.count;
        if !ok {
            errs.push(IrError::InvalidParam {
                from: e.from.clone(),
                to: e.to.clone(),
                message: "redundant replicas must be fed by one map of width == count".into(),
            });
        }
    }
    errs
}

fn gc_triggers(def: &WorkflowDef) -> Vec<NextFunctionInfo> {
    def.platforms
        .iter()
        .map(|(id, p)| NextFunctionInfo {
            name: GC_FUNCTION.to_string(),
            platform: id.clone(),
            invoke_mode: InvokeMode::Gc,
            failover: Vec::new(),
            payload_limit: p.payload_limit_bytes,
        })
        .collect()
}

/// Compiles a validated workflow into one sub-graph per function.
pub fn compile_subgraphs(def: &WorkflowDef) -> Result<SubGraphSet, Vec<IrError>> {
    let mut errs = validate_def(def);
    if !errs.is_empty() {
        return Err(errs);
    }
    let expansions = instantiate(def).map_err(|e| vec![e])?;
    let mut groups: BTreeMap<String, Vec<FanInGroup>> = BTreeMap::new();
    let mut instance_count: BTreeMap<String, usize> = BTreeMap::new();
    let mut sinks = BTreeSet::new();
    for exp in &expansions {
        for (agg, gs) in &exp.fan_in {
            groups.entry(agg.clone()).or_default().extend(gs.iter().cloned());
        }
        for i in &exp.instances {
            *instance_count.entry(i.name.clone()).or_default() += 1;
        }
        sinks.extend(region_sinks(def, &exp.root));
    }
    for (agg, gs) in &groups {
        let declared = def.in_edges(agg).find_map(|e| e.params.arity);
        for g in gs {
            if let Some(d) = declared {
                if d as usize != g.participants.len() {
                    errs.push(IrError::FanInArityMismatch {
                        aggregator: agg.clone(),
                        declared: d,
                        actual: g.participants.len() as u32,
                    });
                }
            }
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let mut set = SubGraphSet::new();
    for f in &def.functions {
        // unreachable functions have no instances and get no sub-graph
        if !instance_count.contains_key(&f.name) {
            continue;
        }
        let outs: Vec<&Edge> = def.out_edges(&f.name).collect();
        let mode = node_mode(def, &f.name).map_err(|e| vec![e])?;
        let mut params = InvokeParams::default();
        let mut targets: Vec<String> = outs.iter().map(|e| e.to.clone()).collect();
        let mut transfer = def.transfer(&f.name);
        match mode {
            InvokeMode::Map => params.width = outs[0].params.width,
            InvokeMode::Choice => params.predicates = outs.iter().map(|e| e.params.predicate.clone()).collect(),
            InvokeMode::Cycle => {
                let (head, exit, bound, predicate) = cycle_parts(def, &f.name);
                targets = vec![head, exit];
                params.bound = Some(bound);
                params.predicate = predicate;
            }
            InvokeMode::ByBatch => {
                params.batch_size = outs[0].params.batch_size;
                params.collab_key = Some(naming::collab_key(&[&f.name, &outs[0].to]));
            }
            InvokeMode::ByRedundant => params.count = outs[0].params.count,
            InvokeMode::FanIn => {
                let agg = &outs[0].to;
                let gs = groups.get(agg).cloned().unwrap_or_default();
                let agg_platform = &def.function(agg).expect("validated").platform;
                let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
                for p in gs.iter().flat_map(|g| &g.participants) {
                    *tally
                        .entry(&def.function(&p.name).expect("validated").platform)
                        .or_default() += 1;
                }
                let best = tally.values().copied().max().unwrap_or(0);
                let placement = if tally.get(agg_platform.as_str()).copied().unwrap_or(0) == best {
                    agg_platform.clone()
                } else {
                    tally
                        .iter()
                        .find(|(_, c)| **c == best)
                        .map(|(p, _)| p.to_string())
                        .unwrap_or_else(|| agg_platform.clone())
                };
                transfer.transfer_by_ds = true;
                transfer.ds = DsKind::Object;
                transfer.placement = Placement::Platform(placement.clone());
                params.fan_in = Some(FanInSpec {
                    aggregator: agg.clone(),
                    placement,
                    groups: gs,
                });
            }
            _ => {}
        }
        let mut next_funcs: Vec<NextFunctionInfo> = targets
            .iter()
            .map(|t| {
                let d = def.function(t).expect("validated");
                NextFunctionInfo {
                    name: t.clone(),
                    platform: d.platform.clone(),
                    invoke_mode: mode,
                    failover: d.failover.clone(),
                    payload_limit: def.payload_limit(&d.platform),
                }
            })
            .collect();
        let terminal = sinks.contains(&f.name);
        if terminal {
            next_funcs.extend(gc_triggers(def));
        }
        if transfer.placement == Placement::AutoMajority {
            let others: Vec<&str> = next_funcs
                .iter()
                .filter(|n| n.invoke_mode != InvokeMode::Gc)
                .map(|n| n.platform.as_str())
                .collect();
            transfer.placement = Placement::Platform(majority_platform(&f.platform, &others));
        }
        set.insert(
            f.name.clone(),
            SubGraph {
                this: f.clone(),
                invoke: InvokePrimitive {
                    mode: if terminal && mode == InvokeMode::Terminal {
                        InvokeMode::Terminal
                    } else {
                        mode
                    },
                    targets,
                    params,
                },
                transfer,
                next_funcs,
                terminal,
            },
        );
    }
    Ok(set)
}

/// Cross-sub-graph consistency. Empty iff the set is usable by the runtime.
pub fn validate_subgraph_set(set: &SubGraphSet) -> Vec<IrError> {
    let mut diags = Vec::new();
    let bad = |f: &str, m: &str| IrError::InvalidSubGraph {
        function: f.to_string(),
        message: m.to_string(),
    };
    let mut fan_in_views: BTreeMap<&str, Vec<&FanInSpec>> = BTreeMap::new();
    for (name, sg) in set {
        if name != &sg.this.name {
            diags.push(bad(name, "map key differs from self.name"));
        }
        if sg.invoke.targets.len() != sg.primitive_targets().count() {
            diags.push(bad(name, "targets and nextFuncs disagree"));
        }
        for (t, n) in sg.invoke.targets.iter().zip(sg.primitive_targets()) {
            if t != &n.name {
                diags.push(bad(name, "nextFuncs order differs from targets"));
            }
        }
        for n in &sg.next_funcs {
            if n.payload_limit == 0 {
                diags.push(bad(name, "payload limit must be positive"));
            }
            if n.invoke_mode != InvokeMode::Gc && !set.contains_key(&n.name) {
                diags.push(IrError::MissingSubGraph(n.name.clone()));
            }
        }
        if sg.terminal != (sg.gc_targets().count() > 0) {
            diags.push(bad(name, "terminal flag and GC triggers disagree"));
        }
        let p = &sg.invoke.params;
        let t = sg.invoke.targets.len();
        let shape_ok = match sg.invoke.mode {
            InvokeMode::Sequence | InvokeMode::ByRedundant | InvokeMode::ByBatch => t == 1,
            InvokeMode::Map => t == 1 && p.width.unwrap_or(0) >= 1,
            InvokeMode::Parallel => t >= 1,
            InvokeMode::Choice => {
                t >= 1
                    && p.predicates.len() == t
                    && p.predicates
                        .iter()
                        .enumerate()
                        .all(|(i, x)| (i + 1 == t) == x.is_none())
            }
            InvokeMode::Cycle => t == 2 && p.bound.unwrap_or(0) >= 1,
            InvokeMode::FanIn => t == 1 && p.fan_in.as_ref().is_some_and(|f| f.aggregator == sg.invoke.targets[0]),
            InvokeMode::Terminal => t == 0 && sg.terminal,
            InvokeMode::Gc => false,
        };
        if !shape_ok {
            diags.push(bad(name, "invocation primitive has the wrong shape"));
        }
        if sg.invoke.mode == InvokeMode::ByBatch && p.batch_size.unwrap_or(0) < 1 {
            diags.push(bad(name, "batch size must be >= 1"));
        }
        if sg.invoke.mode == InvokeMode::ByRedundant && p.count.unwrap_or(0) < 2 {
            diags.push(bad(name, "redundancy count must be >= 2"));
        }
        if let Some(f) = &p.fan_in {
            fan_in_views.entry(f.aggregator.as_str()).or_default().push(f);
            let member = f.groups.iter().any(|g| g.participants.iter().any(|x| &x.name == name));
            if !member {
                diags.push(bad(name, "not listed among its fan-in participants"));
            }
        }
    }
    for (agg, views) in fan_in_views {
        if views.windows(2).any(|w| w[0] != w[1]) {
            diags.push(IrError::InconsistentFanIn(agg.to_string()));
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn chain3() -> &'static str {
        r#"{"name":"chain","platforms":{"P1":{"payloadLimitBytes":262144},"P2":{"payloadLimitBytes":131072}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P2"},"C":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"sequence"},{"from":"B","to":"C","mode":"sequence"}],
            "entry":"A","terminal":"C"}"#
    }

    fn diamond() -> String {
        r#"{"name":"diamond","platforms":{"P1":{"payloadLimitBytes":262144},"P2":{"payloadLimitBytes":131072}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P2"},"C":{"platform":"P2"},"D":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"parallel"},{"from":"A","to":"C","mode":"parallel"},
                     {"from":"B","to":"D","mode":"fanin"},{"from":"C","to":"D","mode":"fanin"}],
            "entry":"A","terminal":"D"}"#
            .to_string()
    }

    #[test]
    fn parses_chain() {
        let def = parse_workflow_def(chain3()).unwrap();
        assert_eq!(def.entry, "A");
        assert_eq!(def.terminal, "C");
        assert_eq!(def.edges.len(), 2);
    }

    #[test]
    fn dangling_edge_is_reported() {
        let text = chain3().replace(r#""to":"C","mode""#, r#""to":"Z","mode""#);
        let errs = parse_workflow_def(&text).unwrap_err();
        assert!(errs.contains(&IrError::DanglingEdge {
            from: "B".into(),
            to: "Z".into()
        }));
    }

    #[test]
    fn syntax_error_has_position() {
        let errs = parse_workflow_def("{\n  \"name\": ").unwrap_err();
        assert!(matches!(errs[0], IrError::SyntaxError { line: 2, .. }));
    }

    #[test]
    fn unknown_platform_and_multiple_entries() {
        let text = chain3().replace(
            r#""C":{"platform":"P1"}"#,
            r#""C":{"platform":"P9"},"X":{"platform":"P1"}"#,
        );
        let errs = parse_workflow_def(&text).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, IrError::UnknownPlatform { platform, .. } if platform == "P9")));
        assert!(errs.iter().any(|e| matches!(e, IrError::MultipleEntries(_))));
    }

    #[test]
    fn diamond_fan_out_placement_is_majority() {
        let set = compile_subgraphs(&parse_workflow_def(&diamond()).unwrap()).unwrap();
        let a = &set["A"];
        assert_eq!(a.invoke.mode, InvokeMode::Parallel);
        assert_eq!(a.invoke.targets, vec!["B", "C"]);
        // tally: P1 once (A), P2 twice (B, C)
        assert_eq!(a.transfer.placement, Placement::Platform("P2".into()));
        let b = &set["B"];
        let fi = b.invoke.params.fan_in.as_ref().unwrap();
        assert_eq!(fi.groups.len(), 1);
        assert_eq!(fi.groups[0].participants.len(), 2);
        assert_eq!(fi.groups[0].aggregator_step, 2);
        assert!(b.transfer.transfer_by_ds);
        assert!(set["D"].terminal);
        assert_eq!(set["D"].gc_targets().count(), 2);
        assert!(validate_subgraph_set(&set).is_empty());
    }

    #[test]
    fn single_function_is_terminal_with_only_gc_triggers() {
        let text = r#"{"name":"one","platforms":{"P1":{"payloadLimitBytes":262144}},
            "functions":{"A":{"platform":"P1"}},"edges":[],"entry":"A","terminal":"A"}"#;
        let set = compile_subgraphs(&parse_workflow_def(text).unwrap()).unwrap();
        assert!(set["A"].invoke.targets.is_empty());
        assert_eq!(set["A"].primitive_targets().count(), 0);
        assert!(set["A"].terminal);
    }

    #[test]
    fn unexpanded_cycle_is_rejected() {
        let text = chain3().replace(
            r#"{"from":"B","to":"C","mode":"sequence"}"#,
            r#"{"from":"B","to":"C","mode":"sequence"},{"from":"C","to":"B","mode":"sequence"}"#,
        );
        let def = parse_workflow_def(&text);
        let errs = match def {
            Ok(d) => compile_subgraphs(&d).unwrap_err(),
            Err(e) => e,
        };
        assert!(!errs.is_empty());
    }

    #[test]
    fn figure_instances() {
        let text = r#"{"name":"fig","platforms":{"P1":{"payloadLimitBytes":262144}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P1"},"C":{"platform":"P1"},"D":{"platform":"P1"},
                         "E":{"platform":"P1"},"F":{"platform":"P1"},"G":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"sequence"},
                     {"from":"B","to":"C","mode":"parallel"},{"from":"B","to":"D","mode":"parallel"},
                     {"from":"C","to":"E","mode":"map","params":{"width":2}},
                     {"from":"D","to":"F","mode":"sequence"},
                     {"from":"E","to":"G","mode":"fanin"},{"from":"F","to":"G","mode":"fanin"}],
            "entry":"A","terminal":"G"}"#;
        let def = parse_workflow_def(text).unwrap();
        let exp = &instantiate(&def).unwrap()[0];
        let locals: BTreeSet<String> = exp.instances.iter().map(Instance::local).collect();
        for id in [
            "C_2-bindex-0",
            "D_2-bindex-1",
            "E_3-bindex-0+0",
            "E_3-bindex-1+0",
            "F_3-bindex-1",
            "G_4-bindex-0",
        ] {
            assert!(locals.contains(id), "{id} missing from {locals:?}");
        }
    }

    #[test]
    fn conditional_fan_in_is_rejected() {
        let text = r#"{"name":"cf","platforms":{"P1":{"payloadLimitBytes":262144}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P1"},"C":{"platform":"P1"},"X":{"platform":"P1"},
                         "Y":{"platform":"P1"},"J":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"parallel"},{"from":"A","to":"C","mode":"parallel"},
                     {"from":"B","to":"X","mode":"choice","params":{"predicate":"p"}},{"from":"B","to":"Y","mode":"choice"},
                     {"from":"X","to":"J","mode":"fanin"},{"from":"Y","to":"J","mode":"fanin"},
                     {"from":"C","to":"J","mode":"fanin"}],
            "entry":"A","terminal":"J"}"#;
        let errs = compile_subgraphs(&parse_workflow_def(text).unwrap()).unwrap_err();
        assert_eq!(errs, vec![IrError::ConditionalFanIn("J".into())]);
    }

    #[test]
    fn declared_arity_must_match() {
        let text = diamond().replace(r#""mode":"fanin"}"#, r#""mode":"fanin","params":{"arity":3}}"#);
        let errs = compile_subgraphs(&parse_workflow_def(&text).unwrap()).unwrap_err();
        assert!(matches!(
            errs[0],
            IrError::FanInArityMismatch {
                declared: 3,
                actual: 2,
                ..
            }
        ));
    }

    #[test]
    fn inconsistent_and_missing_subgraphs_are_diagnosed() {
        let mut set = compile_subgraphs(&parse_workflow_def(&diamond()).unwrap()).unwrap();
        let fi = set.get_mut("C").unwrap().invoke.params.fan_in.as_mut().unwrap();
        fi.groups[0].participants.push(Participant {
            name: "C".into(),
            step: 9,
            branch: BranchStack::from_levels(vec![7]),
        });
        assert!(validate_subgraph_set(&set).contains(&IrError::InconsistentFanIn("D".into())));
        set.remove("D");
        assert!(validate_subgraph_set(&set).contains(&IrError::MissingSubGraph("D".into())));
    }

    #[test]
    fn compile_is_deterministic_and_round_trips() {
        let def = parse_workflow_def(&diamond()).unwrap();
        let a = serde_json::to_string(&compile_subgraphs(&def).unwrap()).unwrap();
        let b = serde_json::to_string(&compile_subgraphs(&def).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: SubGraphSet = serde_json::from_str(&a).unwrap();
        assert_eq!(back, compile_subgraphs(&def).unwrap());
        assert_eq!(parse_workflow_def(&def.to_json()).unwrap(), def);
    }

    #[test]
    fn majority_tie_rules() {
        assert_eq!(majority_platform("P1", &["P2", "P2", "P2"]), "P2");
        assert_eq!(majority_platform("P1", &["P2"]), "P1");
        assert_eq!(majority_platform("P1", &["P1"]), "P1");
        assert_eq!(majority_platform("P1", &["P3", "P2", "P3", "P2"]), "P2");
    }

    #[test]
    fn cycle_expands_bound_iterations() {
        let text = r#"{"name":"nc","platforms":{"P1":{"payloadLimitBytes":262144}},
            "functions":{"A":{"platform":"P1"},"B":{"platform":"P1"},"C":{"platform":"P1"},"D":{"platform":"P1"}},
            "edges":[{"from":"A","to":"B","mode":"sequence"},{"from":"B","to":"C","mode":"sequence"},
                     {"from":"C","to":"B","mode":"cycle","params":{"bound":2}},{"from":"C","to":"D","mode":"sequence"}],
            "entry":"A","terminal":"D"}"#;
        let def = parse_workflow_def(text).unwrap();
        let set = compile_subgraphs(&def).unwrap();
        assert_eq!(set["C"].invoke.targets, vec!["B", "D"]);
        let exp = &instantiate(&def).unwrap()[0];
        assert_eq!(exp.instances.len(), 1 + 2 * 2 + 1);
    }
}
