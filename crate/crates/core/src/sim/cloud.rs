//! The simulated multi-cloud: platforms with stores and async queues, fault
//! injection, metering and the operation history.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use crate::ir::{InvokeMode, SubGraphSet, GC_FUNCTION};
use crate::naming::{render_local, BranchStack, FunctionId};
use crate::runtime::envelope::{Control, Data, Envelope, Meta};
use crate::runtime::gc::run_gc;
use crate::runtime::{handle, CrashPoint, Host, Registry, RuntimeConfig, RuntimeEvent};
use crate::shim::{
    AcceptToken, Backend, BitmapState, DataStore, DsKind, DsSpec, FaasClient, FaasSpec, ShimError, StoredValue,
};

use super::exec::Executor;
use super::history::{History, HistoryRecord};
use super::meter::{Counter, Meter, OpCounts};
use super::store::Store;
use super::topology::{glob_regex, CrashRule, Delay, FaultPlan, Topology};
use super::SimError;

/// Meter key of submissions made from outside any function.
pub const CLIENT_ORIGIN: &str = "client";

const WORKFLOW_NAMESPACE: Uuid = Uuid::from_u128(0x1b7e_52c4_0f3a_4d6b_9e21_77c8_a4d0_35f9);

/// 64-bit FNV-1a digest, rendered as hex; histories record digests instead
/// of payloads.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn value_json(v: &StoredValue) -> Value {
    match v {
        StoredValue::Item(b) => json!({"type": "item", "digest": digest(b), "len": b.len()}),
        StoredValue::List(l) => json!({"type": "list", "value": l}),
        StoredValue::Bitmap(b) => json!({"type": "bitmap", "bits": b.bits, "completedBy": b.completed_by}),
    }
}

fn bitmap_json(b: &BitmapState) -> Value {
    json!({"type": "bitmap", "bits": b.bits, "completedBy": b.completed_by})
}

/// Label a caller records in its invocation list for this request.
pub fn invocation_label(caller_workflow: Option<&str>, function: &str, platform: &str, env: &Envelope) -> String {
    if function == GC_FUNCTION {
        return format!("{GC_FUNCTION}@{platform}");
    }
    let local = render_local(function, env.control.step, &env.control.branch);
    if caller_workflow == Some(env.control.workflow_id.as_str()) {
        local
    } else {
        format!("{}/{local}", env.control.workflow_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Completed,
    Failed,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunStatus {
    pub workflow_id: String,
    pub entry: String,
    pub submitted_at: u64,
    /// Started by a batch window rather than a client submission.
    pub spawned: bool,
    pub status: RunState,
    pub completed_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeadLetter {
    pub workflow_id: String,
    pub function: String,
    pub platform: String,
    pub label: String,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub events: u64,
    pub final_tick: u64,
    pub runs: Vec<RunStatus>,
    pub op_counts: BTreeMap<String, OpCounts>,
    pub totals: OpCounts,
    /// User-code executions per instance.
    pub executions: BTreeMap<String, u64>,
    /// Executions beyond the first, for instances that ran more than once.
    pub duplicate_executions: BTreeMap<String, u64>,
    pub crashes: u64,
    pub dead_letters: Vec<DeadLetter>,
    pub gc_trigger_failures: u64,
    /// Keys left in each `<platform>/<kind>` store.
    pub final_stores: BTreeMap<String, Vec<String>>,
}

impl RunReport {
    pub fn completed(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunState::Completed).count()
    }

    pub fn status(&self, workflow_id: &str) -> Option<RunState> {
        self.runs
            .iter()
            .find(|r| r.workflow_id == workflow_id)
            .map(|r| r.status)
    }

    /// Keys carrying the run's prefix in any store.
    pub fn residue(&self, workflow_id: &str) -> Vec<String> {
        let prefix = format!("{workflow_id}/");
        self.final_stores
            .iter()
            .flat_map(|(s, keys)| {
                keys.iter()
                    .filter(|k| k.starts_with(&prefix))
                    .map(move |k| format!("{s}:{k}"))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Deployment {
    set: SubGraphSet,
    registry: Registry,
    cfg: RuntimeConfig,
    deployed: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone)]
struct Delivery {
    platform: String,
    function: String,
    envelope: Envelope,
    label: String,
    attempt: u32,
}

#[derive(Debug, Clone)]
struct RunRecord {
    entry: String,
    submitted_at: u64,
    spawned: bool,
    completed_at: Option<u64>,
}

pub(crate) struct SimInner {
    pub(crate) exec: Rc<Executor>,
    topology: Topology,
    plan: FaultPlan,
    crash_rules: Vec<(Regex, CrashRule)>,
    duplicate_rules: Vec<(Regex, u32)>,
    latency_rng: RefCell<ChaCha8Rng>,
    stores: RefCell<BTreeMap<(String, DsKind), Store>>,
    meter: RefCell<Meter>,
    history: RefCell<History>,
    app: RefCell<Option<Rc<Deployment>>>,
    runs: RefCell<BTreeMap<String, RunRecord>>,
    executions: RefCell<BTreeMap<String, u64>>,
    dead_letters: RefCell<Vec<DeadLetter>>,
    crashes: Cell<u64>,
    gc_trigger_failures: Cell<u64>,
    requests: Cell<u64>,
    submissions: Cell<u64>,
    seed: u64,
}

/// Identity charged for the operations of one handler.
struct Origin {
    platform: String,
    id: RefCell<Option<FunctionId>>,
}

impl Origin {
    fn key(&self) -> String {
        self.id
            .borrow()
            .as_ref()
            .map(FunctionId::render)
            .unwrap_or_else(|| CLIENT_ORIGIN.to_string())
    }
}

impl SimInner {
    fn now(&self) -> u64 {
        self.exec.now()
    }

    fn in_outage(&self, platform: &str, tick: u64) -> bool {
        self.plan.outages.iter().any(|o| o.covers(platform, tick))
    }

    fn draw(&self, from: &str, to: &str) -> u64 {
        let d: Delay = if from == to {
            self.topology.latency.same_cloud
        } else {
            self.topology.latency.cross_cloud
        };
        if d.jitter == 0 {
            d.base
        } else {
            d.base + self.latency_rng.borrow_mut().gen_range(0..=d.jitter)
        }
    }

    fn retry_budget(&self, platform: &str) -> u32 {
        let app = self.app.borrow();
        app.as_ref()
            .and_then(|a| a.cfg.retry_budget)
            .or_else(|| self.topology.platform(platform).map(|p| p.retry_budget))
            .unwrap_or(0)
    }

    #[allow(clippy::too_many_arguments)]
    fn log(&self, op: &str, key: &str, args: Value, result: Value, begin: u64, origin: &Origin, target: String) {
        self.history.borrow_mut().push(HistoryRecord {
            seq: 0,
            op: op.to_string(),
            key: key.to_string(),
            args,
            result,
            begin,
            end: self.now(),
            origin: origin.key(),
            target,
        });
    }

    fn on_event(&self, ev: RuntimeEvent) {
        match ev {
            RuntimeEvent::UserExec(id) => *self.executions.borrow_mut().entry(id.render()).or_default() += 1,
            RuntimeEvent::Completed { workflow_id } => {
                let now = self.now();
                if let Some(r) = self.runs.borrow_mut().get_mut(&workflow_id) {
                    r.completed_at.get_or_insert(now);
                }
            }
            RuntimeEvent::GcTriggerFailed { .. } => self.gc_trigger_failures.set(self.gc_trigger_failures.get() + 1),
        }
    }

    fn note_run(&self, workflow_id: &str, entry: &str, spawned: bool) {
        let now = self.now();
        self.runs
            .borrow_mut()
            .entry(workflow_id.to_string())
            .or_insert(RunRecord {
                entry: entry.to_string(),
                submitted_at: now,
                spawned,
                completed_at: None,
            });
    }

    /// Accepts a request into the platform queue and schedules its delivery
    /// plus any injected duplicate deliveries.
    fn enqueue(self: &Rc<Self>, platform: &str, function: &str, envelope: &Envelope, label: String) -> AcceptToken {
        let n = self.requests.get();
        self.requests.set(n + 1);
        let local = render_local(function, envelope.control.step, &envelope.control.branch);
        let copies = 1 + self
            .duplicate_rules
            .iter()
            .filter(|(re, _)| re.is_match(&local))
            .map(|(_, c)| *c)
            .sum::<u32>();
        for _ in 0..copies {
            let delay = self.draw(platform, platform);
            self.schedule_delivery(
                self.now() + delay,
                Delivery {
                    platform: platform.to_string(),
                    function: function.to_string(),
                    envelope: envelope.clone(),
                    label: label.clone(),
                    attempt: 0,
                },
            );
        }
        AcceptToken {
            request_id: format!("req-{n}"),
            platform_id: platform.to_string(),
        }
    }

    fn schedule_delivery(self: &Rc<Self>, at: u64, d: Delivery) {
        let me = self.clone();
        self.exec.schedule(at, move || me.deliver(d));
    }

    fn deliver(self: &Rc<Self>, d: Delivery) {
        if self.in_outage(&d.platform, self.now()) {
            let err = ShimError::PlatformUnavailable(d.platform.clone()).to_string();
            self.fail_attempt(d, err);
            return;
        }
        let Some(app) = self.app.borrow().clone() else { return };
        let me = self.clone();
        self.exec.spawn(async move {
            let host = SimHost::new(&me, &d.platform, d.attempt);
            let result = if d.function == GC_FUNCTION {
                run_gc(&host, &app.cfg, &d.envelope).await.map(|_| ())
            } else {
                match app.set.get(&d.function) {
                    Some(sg) => handle(&host, &app.cfg, &app.registry, sg, &d.envelope)
                        .await
                        .map(|_| ()),
                    None => Err(crate::runtime::RuntimeError::InvariantBreach(format!(
                        "no sub-graph `{}`",
                        d.function
                    ))),
                }
            };
            if let Err(e) = result {
                if matches!(e, crate::runtime::RuntimeError::Crashed(_)) {
                    me.crashes.set(me.crashes.get() + 1);
                }
                me.fail_attempt(d, e.to_string());
            }
        });
    }

    fn fail_attempt(self: &Rc<Self>, d: Delivery, error: String) {
        if d.attempt < self.retry_budget(&d.platform) {
            let next = Delivery {
                attempt: d.attempt + 1,
                ..d
            };
            self.schedule_delivery(self.now() + 1, next);
        } else {
            self.dead_letters.borrow_mut().push(DeadLetter {
                workflow_id: d.envelope.control.workflow_id.clone(),
                function: d.function.clone(),
                platform: d.platform.clone(),
                label: d.label.clone(),
                attempts: d.attempt + 1,
                error,
            });
        }
    }

    fn deployed(&self, platform: &str, function: &str) -> bool {
        self.app
            .borrow()
            .as_ref()
            .is_some_and(|a| a.deployed.contains(&(platform.to_string(), function.to_string())))
    }
}

/// Backend handle bound to one handler (or the external client).
#[derive(Clone)]
pub struct SimBackend {
    cloud: Rc<SimInner>,
    origin: Rc<Origin>,
}

pub struct SimDs {
    cloud: Rc<SimInner>,
    origin: Rc<Origin>,
    spec: DsSpec,
}

pub struct SimFaas {
    cloud: Rc<SimInner>,
    origin: Rc<Origin>,
    spec: FaasSpec,
    limit: u64,
}

impl SimDs {
    async fn op<T>(
        &self,
        op: &str,
        key: &str,
        args: Value,
        counter: Counter,
        f: impl FnOnce(&mut Store) -> Result<T, ShimError>,
        show: impl Fn(&T) -> Value,
    ) -> Result<T, ShimError> {
        let c = &self.cloud;
        let begin = c.now();
        let delay = c.draw(&self.origin.platform, &self.spec.platform_id);
        c.exec.sleep(delay).await;
        let counter = match (counter, self.spec.kind) {
            (Counter::Write, DsKind::Object) => Counter::ObjectWrite,
            (Counter::Read, DsKind::Object) => Counter::ObjectRead,
            (c, _) => c,
        };
        c.meter.borrow_mut().bump(
            &self.origin.key(),
            counter,
            self.origin.platform != self.spec.platform_id,
        );
        let result = if c.in_outage(&self.spec.platform_id, c.now()) {
            Err(ShimError::PlatformUnavailable(self.spec.platform_id.clone()))
        } else {
            let mut stores = c.stores.borrow_mut();
            match stores.get_mut(&(self.spec.platform_id.clone(), self.spec.kind)) {
                Some(store) => f(store),
                None => Err(ShimError::NoSuchStore(format!(
                    "{}/{}",
                    self.spec.platform_id,
                    self.spec.kind.as_str()
                ))),
            }
        };
        let shown = match &result {
            Ok(v) => json!({ "ok": show(v) }),
            Err(e) => json!({ "err": e.to_string() }),
        };
        c.log(
            op,
            key,
            args,
            shown,
            begin,
            &self.origin,
            format!("{}/{}", self.spec.platform_id, self.spec.kind.as_str()),
        );
        result
    }
}

impl DataStore for SimDs {
    fn spec(&self) -> &DsSpec {
        &self.spec
    }

    async fn store_output_data(&self, key: &str, data: &[u8]) -> Result<bool, ShimError> {
        let args = json!({"digest": digest(data), "len": data.len()});
        self.op(
            "store_output_data",
            key,
            args,
            Counter::Write,
            |s| s.store_output_data(key, data),
            |b| json!(b),
        )
        .await
    }

    async fn get_value(&self, key: &str) -> Result<Option<StoredValue>, ShimError> {
        self.op(
            "get_value",
            key,
            json!({}),
            Counter::Read,
            |s| Ok(s.get_value(key)),
            |v| v.as_ref().map(value_json).unwrap_or(Value::Null),
        )
        .await
    }

    async fn create_invocation_list(&self, key: &str) -> Result<bool, ShimError> {
        self.op(
            "create_invocation_list",
            key,
            json!({}),
            Counter::Write,
            |s| s.create_invocation_list(key),
            |b| json!(b),
        )
        .await
    }

    async fn append_and_get_list(&self, key: &str, names: &[String]) -> Result<Vec<String>, ShimError> {
        self.op(
            "append_and_get_list",
            key,
            json!({ "names": names }),
            Counter::Write,
            |s| s.append_and_get_list(key, names),
            |l| json!(l),
        )
        .await
    }

    async fn create_bitmap(&self, size: usize, key: &str) -> Result<bool, ShimError> {
        self.op(
            "create_bitmap",
            key,
            json!({ "size": size }),
            Counter::Write,
            |s| s.create_bitmap(size, key),
            |b| json!(b),
        )
        .await
    }

    async fn update_bitmap(&self, index: usize, key: &str) -> Result<BitmapState, ShimError> {
        self.op(
            "update_bitmap",
            key,
            json!({ "index": index }),
            Counter::Write,
            |s| s.update_bitmap(index, key),
            bitmap_json,
        )
        .await
    }

    async fn list_keys(&self, prefix: &str) -> Result<Vec<String>, ShimError> {
        self.op(
            "list_keys",
            prefix,
            json!({}),
            Counter::Scan,
            |s| Ok(s.list_keys(prefix)),
            |l| json!(l),
        )
        .await
    }

    async fn delete(&self, key: &str) -> Result<bool, ShimError> {
        self.op(
            "delete",
            key,
            json!({}),
            Counter::Delete,
            |s| Ok(s.delete(key)),
            |b| json!(b),
        )
        .await
    }
}

impl FaasClient for SimFaas {
    fn spec(&self) -> &FaasSpec {
        &self.spec
    }

    fn payload_limit(&self) -> u64 {
        self.limit
    }

    async fn async_invoke(&self, function: &str, payload: &Envelope) -> Result<AcceptToken, ShimError> {
        let c = &self.cloud;
        let begin = c.now();
        let platform = self.spec.platform_id.clone();
        let delay = c.draw(&self.origin.platform, &platform);
        c.exec.sleep(delay).await;
        c.meter
            .borrow_mut()
            .bump(&self.origin.key(), Counter::Invoke, self.origin.platform != platform);
        let caller = self.origin.id.borrow().clone();
        let label = invocation_label(
            caller.as_ref().map(|i| i.workflow_id.as_str()),
            function,
            &platform,
            payload,
        );
        let now = c.now();
        let wrong = caller.as_ref().is_some_and(|id| {
            c.plan
                .wrong_invocations
                .iter()
                .any(|w| w.edge.from == id.name && w.edge.to == function && w.window.start <= now && now < w.window.end)
        });
        let size = payload.wire_size();
        let result = if c.in_outage(&platform, now) {
            Err(ShimError::PlatformUnavailable(platform.clone()))
        } else if wrong || !c.deployed(&platform, function) {
            Err(ShimError::UnknownFunction {
                function: function.to_string(),
                platform: platform.clone(),
            })
        } else if size > self.limit {
            Err(ShimError::PayloadTooLarge {
                size,
                limit: self.limit,
            })
        } else if payload.validate().is_err() {
            Err(ShimError::InvalidArgument("malformed envelope".into()))
        } else {
            if caller.as_ref().map(|i| &i.workflow_id) != Some(&payload.control.workflow_id) && function != GC_FUNCTION
            {
                c.note_run(&payload.control.workflow_id, function, true);
            }
            Ok(c.enqueue(&platform, function, payload, label.clone()))
        };
        let ctl = &payload.control;
        let args = json!({
            "platform": platform,
            "workflowId": ctl.workflow_id,
            "step": ctl.step,
            "branch": ctl.branch,
            "invokeMode": ctl.invoke_mode,
            "label": label,
            "size": size,
            "transfer": match payload.data {
                Data::Direct { .. } => "direct",
                Data::Indirect { .. } => "indirect",
            },
        });
        let shown = match &result {
            Ok(t) => json!({ "ok": t.request_id }),
            Err(e) => json!({ "err": e.to_string() }),
        };
        c.log("async_invoke", function, args, shown, begin, &self.origin, platform);
        result
    }
}

impl Backend for SimBackend {
    type Ds = SimDs;
    type Faas = SimFaas;

    async fn ds_create(&self, spec: &DsSpec) -> Result<SimDs, ShimError> {
        let c = &self.cloud;
        c.meter.borrow_mut().bump(&self.origin.key(), Counter::DsCreate, false);
        let Some(p) = c.topology.platform(&spec.platform_id) else {
            return Err(ShimError::NoSuchStore(spec.platform_id.clone()));
        };
        if spec.credentials.is_empty() {
            return Err(ShimError::MissingCredentials(spec.platform_id.clone()));
        }
        let offered = match spec.kind {
            DsKind::Table => p.table_store,
            DsKind::Object => p.object_store,
        };
        if !offered {
            return Err(ShimError::NoSuchStore(format!(
                "{}/{}",
                spec.platform_id,
                spec.kind.as_str()
            )));
        }
        if c.in_outage(&spec.platform_id, c.now()) {
            return Err(ShimError::PlatformUnavailable(spec.platform_id.clone()));
        }
        Ok(SimDs {
            cloud: c.clone(),
            origin: self.origin.clone(),
            spec: spec.clone(),
        })
    }

    async fn faas_create(&self, spec: &FaasSpec) -> Result<SimFaas, ShimError> {
        let c = &self.cloud;
        c.meter
            .borrow_mut()
            .bump(&self.origin.key(), Counter::FaasCreate, false);
        let Some(p) = c.topology.platform(&spec.platform_id) else {
            return Err(ShimError::InvalidArgument(format!(
                "unknown platform `{}`",
                spec.platform_id
            )));
        };
        if spec.credentials.is_empty() {
            return Err(ShimError::MissingCredentials(spec.platform_id.clone()));
        }
        Ok(SimFaas {
            cloud: c.clone(),
            origin: self.origin.clone(),
            spec: spec.clone(),
            limit: p.payload_limit_bytes,
        })
    }
}

struct SimHost {
    cloud: Rc<SimInner>,
    backend: SimBackend,
    platform: String,
    attempt: u32,
}

impl SimHost {
    fn new(cloud: &Rc<SimInner>, platform: &str, attempt: u32) -> Self {
        Self {
            cloud: cloud.clone(),
            backend: SimBackend {
                cloud: cloud.clone(),
                origin: Rc::new(Origin {
                    platform: platform.to_string(),
                    id: RefCell::new(None),
                }),
            },
            platform: platform.to_string(),
            attempt,
        }
    }
}

impl Host for SimHost {
    type B = SimBackend;

    fn backend(&self) -> &SimBackend {
        &self.backend
    }

    fn platform(&self) -> &str {
        &self.platform
    }

    fn bind(&self, id: &FunctionId) {
        *self.backend.origin.id.borrow_mut() = Some(id.clone());
    }

    fn should_crash(&self, id: &FunctionId, point: CrashPoint) -> bool {
        let local = id.local();
        self.cloud
            .crash_rules
            .iter()
            .any(|(re, r)| r.crash_point == point && self.attempt < r.attempts && re.is_match(&local))
    }

    fn record(&self, event: RuntimeEvent) {
        self.cloud.on_event(event);
    }

    async fn sleep(&self, ticks: u64) {
        self.cloud.exec.sleep(ticks).await
    }
}

/// A deterministic simulated multi-cloud.
#[derive(Clone)]
pub struct SimCloud {
    inner: Rc<SimInner>,
}

impl SimCloud {
    pub fn configure_sim(topology: Topology, plan: FaultPlan, seed: u64) -> Result<Self, SimError> {
        topology.validate()?;
        plan.validate(&topology)?;
        let crash_rules = plan
            .crashes
            .iter()
            .map(|r| Ok((glob_regex(&r.function_id_pattern)?, r.clone())))
            .collect::<Result<_, SimError>>()?;
        let duplicate_rules = plan
            .duplicates
            .iter()
            .map(|r| Ok((glob_regex(&r.function_id_pattern)?, r.copies)))
            .collect::<Result<_, SimError>>()?;
        let mut stores = BTreeMap::new();
        for p in &topology.platforms {
            if p.table_store {
                stores.insert((p.id.clone(), DsKind::Table), Store::new(DsKind::Table));
            }
            if p.object_store {
                stores.insert((p.id.clone(), DsKind::Object), Store::new(DsKind::Object));
            }
        }
        Ok(Self {
            inner: Rc::new(SimInner {
                exec: Executor::new(seed),
                topology,
                plan,
                crash_rules,
                duplicate_rules,
                latency_rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_9c11_0b0e)),
                stores: RefCell::new(stores),
                meter: RefCell::new(Meter::default()),
                history: RefCell::new(History::default()),
                app: RefCell::new(None),
                runs: RefCell::new(BTreeMap::new()),
                executions: RefCell::new(BTreeMap::new()),
                dead_letters: RefCell::new(Vec::new()),
                crashes: Cell::new(0),
                gc_trigger_failures: Cell::new(0),
                requests: Cell::new(0),
                submissions: Cell::new(0),
                seed,
            }),
        })
    }

    /// Deploys every sub-graph on its platform and its failover platforms,
    /// and a GC function on every platform.
    pub fn deploy(&self, set: SubGraphSet, registry: Registry, cfg: RuntimeConfig) -> Result<(), SimError> {
        let topo = &self.inner.topology;
        let mut deployed = BTreeSet::new();
        for sg in set.values() {
            for p in std::iter::once(&sg.this.platform).chain(&sg.this.failover) {
                if topo.platform(p).is_none() {
                    return Err(SimError::InvalidPlan(format!(
                        "`{}` deployed on unknown platform `{p}`",
                        sg.this.name
                    )));
                }
                deployed.insert((p.clone(), sg.this.name.clone()));
            }
            for n in &sg.next_funcs {
                if topo.platform(&n.platform).is_none() {
                    return Err(SimError::InvalidPlan(format!(
                        "successor on unknown platform `{}`",
                        n.platform
                    )));
                }
            }
        }
        for p in &topo.platforms {
            deployed.insert((p.id.clone(), GC_FUNCTION.to_string()));
        }
        *self.inner.app.borrow_mut() = Some(Rc::new(Deployment {
            set,
            registry,
            cfg,
            deployed,
        }));
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.inner.now()
    }

    fn next_workflow_id(&self) -> String {
        let n = self.inner.submissions.get();
        self.inner.submissions.set(n + 1);
        Uuid::new_v5(&WORKFLOW_NAMESPACE, format!("{}:{n}", self.inner.seed).as_bytes()).to_string()
    }

    /// Enqueues a new run of the workflow at its entry function now.
    pub fn submit(&self, entry: &str, input: Vec<u8>) -> Result<String, SimError> {
        let c = &self.inner;
        let app = c.app.borrow().clone().ok_or(SimError::NotDeployed)?;
        let sg = app
            .set
            .get(entry)
            .ok_or_else(|| SimError::UnknownFunction(entry.to_string()))?;
        let platform = sg.this.platform.clone();
        let workflow_id = self.next_workflow_id();
        if c.in_outage(&platform, c.now()) {
            return Err(SimError::PlatformUnavailable(platform));
        }
        let envelope = Envelope::new(
            Control {
                workflow_id: workflow_id.clone(),
                step: 0,
                branch: BranchStack::new(),
                session: workflow_id.clone(),
                invoke_mode: InvokeMode::Sequence,
            },
            Data::Direct { payload: input },
            Meta::default(),
        );
        c.note_run(&workflow_id, entry, false);
        let label = render_local(entry, 0, &BranchStack::new());
        c.enqueue(&platform, entry, &envelope, label);
        Ok(workflow_id)
    }

    /// Schedules delivery of `envelope` to `function` on its primary
    /// platform at `tick`, as if some caller had invoked it. Registers the
    /// envelope's run. Lets drivers control arrival orders exactly.
    pub fn inject(&self, tick: u64, function: &str, envelope: Envelope) -> Result<(), SimError> {
        let c = &self.inner;
        let app = c.app.borrow().clone().ok_or(SimError::NotDeployed)?;
        let sg = app
            .set
            .get(function)
            .ok_or_else(|| SimError::UnknownFunction(function.to_string()))?;
        let platform = sg.this.platform.clone();
        let label = invocation_label(None, function, &platform, &envelope);
        let me = self.clone();
        let function = function.to_string();
        c.exec.schedule(tick, move || {
            me.inner.note_run(&envelope.control.workflow_id, &function, false);
            me.inner.schedule_delivery(
                me.now(),
                Delivery {
                    platform,
                    function,
                    envelope,
                    label,
                    attempt: 0,
                },
            );
        });
        Ok(())
    }

    /// Schedules a submission at a later tick. Rejections are recorded as
    /// failed runs.
    pub fn submit_at(&self, tick: u64, entry: &str, input: Vec<u8>) {
        let me = self.clone();
        let entry = entry.to_string();
        self.inner.exec.schedule(tick, move || {
            if let Err(e) = me.submit(&entry, input) {
                let wid = me.next_workflow_id();
                me.inner.note_run(&wid, &entry, false);
                me.inner.dead_letters.borrow_mut().push(DeadLetter {
                    workflow_id: wid,
                    function: entry.clone(),
                    platform: String::new(),
                    label: entry.clone(),
                    attempts: 0,
                    error: e.to_string(),
                });
            }
        });
    }

    /// Processes events up to and including tick `tick`.
    pub fn run_until(&self, tick: u64) {
        let ex = &self.inner.exec;
        while ex.peek().is_some_and(|t| t <= tick) {
            ex.step();
        }
    }

    /// Processes events until none remain; fails after `max_events`.
    pub fn run_until_quiescent(&self, max_events: u64) -> Result<RunReport, SimError> {
        let ex = &self.inner.exec;
        let start = ex.processed();
        while ex.step() {
            if ex.processed() - start > max_events {
                return Err(SimError::EventBudgetExceeded(max_events));
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> RunReport {
        let c = &self.inner;
        let dead = c.dead_letters.borrow().clone();
        let runs = c
            .runs
            .borrow()
            .iter()
            .map(|(wid, r)| RunStatus {
                workflow_id: wid.clone(),
                entry: r.entry.clone(),
                submitted_at: r.submitted_at,
                spawned: r.spawned,
                status: if r.completed_at.is_some() {
                    RunState::Completed
                } else if dead.iter().any(|d| &d.workflow_id == wid) {
                    RunState::Failed
                } else {
                    RunState::Incomplete
                },
                completed_at: r.completed_at,
            })
            .collect();
        let executions = c.executions.borrow().clone();
        let duplicate_executions = executions
            .iter()
            .filter(|(_, n)| **n > 1)
            .map(|(k, n)| (k.clone(), n - 1))
            .collect();
        let meter = c.meter.borrow();
        RunReport {
            events: c.exec.processed(),
            final_tick: c.now(),
            runs,
            op_counts: meter.per_function.clone(),
            totals: meter.total(),
            executions,
            duplicate_executions,
            crashes: c.crashes.get(),
            dead_letters: dead,
            gc_trigger_failures: c.gc_trigger_failures.get(),
            final_stores: c
                .stores
                .borrow()
                .iter()
                .map(|((p, k), s)| (format!("{p}/{}", k.as_str()), s.items.keys().cloned().collect()))
                .collect(),
        }
    }

    pub fn history(&self) -> History {
        self.inner.history.borrow().clone()
    }

    pub fn meter(&self) -> Meter {
        self.inner.meter.borrow().clone()
    }

    pub fn topology(&self) -> &Topology {
        &self.inner.topology
    }

    /// Backend handle acting as an external client on `platform`, for
    /// driving shim operations directly.
    pub fn client_backend(&self, platform: &str) -> SimBackend {
        SimBackend {
            cloud: self.inner.clone(),
            origin: Rc::new(Origin {
                platform: platform.to_string(),
                id: RefCell::new(None),
            }),
        }
    }

    /// Spawns a task on the simulator's executor.
    pub fn spawn(&self, fut: impl std::future::Future<Output = ()> + 'static) {
        self.inner.exec.spawn(fut);
    }

    /// Hash of the store contents and clock.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.inner.now().hash(&mut h);
        for ((p, k), s) in self.inner.stores.borrow().iter() {
            p.hash(&mut h);
            k.hash(&mut h);
            s.hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{compile_subgraphs, parse_workflow_def};

    const CHAIN: &str = r#"{"name":"chain","platforms":{"P1":{"payloadLimitBytes":262144},"P2":{"payloadLimitBytes":131072}},
        "functions":{"A":{"platform":"P1"},"B":{"platform":"P2"},"C":{"platform":"P1"}},
        "edges":[{"from":"A","to":"B","mode":"sequence"},{"from":"B","to":"C","mode":"sequence"}],
        "entry":"A","terminal":"C"}"#;

    const DIAMOND: &str = r#"{"name":"diamond","platforms":{"P1":{"payloadLimitBytes":262144},"P2":{"payloadLimitBytes":131072}},
        "functions":{"A":{"platform":"P1"},"B":{"platform":"P2"},"C":{"platform":"P2"},"D":{"platform":"P1"}},
        "edges":[{"from":"A","to":"B","mode":"parallel"},{"from":"A","to":"C","mode":"parallel"},
                 {"from":"B","to":"D","mode":"fanin"},{"from":"C","to":"D","mode":"fanin"}],
        "entry":"A","terminal":"D"}"#;

    fn cloud(text: &str, plan: FaultPlan) -> SimCloud {
        let set = compile_subgraphs(&parse_workflow_def(text).unwrap()).unwrap();
        let c = SimCloud::configure_sim(Topology::two_platform(), plan, 7).unwrap();
        c.deploy(set, Registry::new(), RuntimeConfig::default()).unwrap();
        c
    }

    #[test]
    fn chain_completes_and_collects() {
        let c = cloud(CHAIN, FaultPlan::none());
        let wid = c.submit("A", b"x".to_vec()).unwrap();
        let r = c.run_until_quiescent(100_000).unwrap();
        assert_eq!(r.status(&wid), Some(RunState::Completed), "{}", r.to_json());
        assert!(r.residue(&wid).is_empty(), "{:?}", r.residue(&wid));
        assert_eq!(r.executions.len(), 3);
        assert!(r.duplicate_executions.is_empty());
    }

    #[test]
    fn diamond_aggregates_once() {
        let c = cloud(DIAMOND, FaultPlan::none());
        let wid = c.submit("A", b"x".to_vec()).unwrap();
        let r = c.run_until_quiescent(100_000).unwrap();
        assert_eq!(r.status(&wid), Some(RunState::Completed), "{}", r.to_json());
        assert_eq!(r.executions.values().sum::<u64>(), 4);
        assert!(r.residue(&wid).is_empty());
    }

    #[test]
    fn crash_is_retried_without_reexecution_after_checkpoint() {
        let plan: FaultPlan = serde_json::from_str(
            r#"{"crashes":[{"functionIdPattern":"B_*","crashPoint":"after-invoke-before-ivk-append"}]}"#,
        )
        .unwrap();
        let c = cloud(CHAIN, plan);
        let wid = c.submit("A", b"x".to_vec()).unwrap();
        let r = c.run_until_quiescent(100_000).unwrap();
        assert_eq!(r.status(&wid), Some(RunState::Completed));
        assert_eq!(r.crashes, 1);
        assert!(r.duplicate_executions.is_empty(), "{:?}", r.duplicate_executions);
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let c = cloud(DIAMOND, FaultPlan::none());
            c.submit("A", b"x".to_vec()).unwrap();
            c.run_until_quiescent(100_000).unwrap();
            (c.history().to_jsonl(), c.state_hash())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn simulated_histories_linearize() {
        let c = cloud(DIAMOND, FaultPlan::none());
        for _ in 0..3 {
            c.submit("A", b"x".to_vec()).unwrap();
        }
        c.run_until_quiescent(100_000).unwrap();
        let s = super::super::linearizability::check_history(&c.history()).unwrap();
        assert!(s.keys > 10);
    }
}
