//! Simulated platforms, latency model and fault plan documents.
//!
//! Times are simulator ticks. Outage windows are half-open `[startEvent,
//! endEvent)` tick intervals.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::runtime::CrashPoint;

use super::SimError;

pub const AWS_LIKE_LIMIT: u64 = 262_144;
pub const ALIYUN_LIKE_LIMIT: u64 = 131_072;

fn yes() -> bool {
    true
}

fn two() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlatformSpec {
    pub id: String,
    pub payload_limit_bytes: u64,
    #[serde(default = "two")]
    pub retry_budget: u32,
    #[serde(default = "yes")]
    pub table_store: bool,
    #[serde(default = "yes")]
    pub object_store: bool,
}

impl PlatformSpec {
    pub fn new(id: &str, payload_limit_bytes: u64) -> Self {
        Self {
            id: id.to_string(),
            payload_limit_bytes,
            retry_budget: 2,
            table_store: true,
            object_store: true,
        }
    }
}

/// Delay of `base + uniform(0..=jitter)` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Delay {
    pub base: u64,
    #[serde(default)]
    pub jitter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyModel {
    pub same_cloud: Delay,
    pub cross_cloud: Delay,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            same_cloud: Delay { base: 1, jitter: 0 },
            cross_cloud: Delay { base: 2, jitter: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Topology {
    pub platforms: Vec<PlatformSpec>,
    #[serde(default)]
    pub latency: LatencyModel,
}

impl Topology {
    /// Two platforms with the AWS-like and Aliyun-like payload limits.
    pub fn two_platform() -> Self {
        Self {
            platforms: vec![
                PlatformSpec::new("P1", AWS_LIKE_LIMIT),
                PlatformSpec::new("P2", ALIYUN_LIKE_LIMIT),
            ],
            latency: LatencyModel::default(),
        }
    }

    /// Adds a backup platform P3 with the AWS-like limit.
    pub fn three_platform() -> Self {
        let mut t = Self::two_platform();
        t.platforms.push(PlatformSpec::new("P3", AWS_LIKE_LIMIT));
        t
    }

    pub fn platform(&self, id: &str) -> Option<&PlatformSpec> {
        self.platforms.iter().find(|p| p.id == id)
    }

    pub fn with_retry_budget(mut self, budget: u32) -> Self {
        for p in &mut self.platforms {
            p.retry_budget = budget;
        }
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.platforms.is_empty() {
            return Err(SimError::InvalidPlan("topology has no platforms".into()));
        }
        for (i, p) in self.platforms.iter().enumerate() {
            if p.payload_limit_bytes == 0 {
                return Err(SimError::InvalidPlan(format!(
                    "platform `{}` has a zero payload limit",
                    p.id
                )));
            }
            if self.platforms[..i].iter().any(|q| q.id == p.id) {
                return Err(SimError::InvalidPlan(format!("platform `{}` declared twice", p.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Outage {
    pub platform_id: String,
    pub start_event: u64,
    pub end_event: u64,
}

impl Outage {
    pub fn covers(&self, platform: &str, tick: u64) -> bool {
        self.platform_id == platform && self.start_event <= tick && tick < self.end_event
    }
}

/// Crash the handler at `crashPoint` on every delivery attempt below
/// `attempts` of instances whose local id matches the glob pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CrashRule {
    pub function_id_pattern: String,
    pub crash_point: CrashPoint,
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRef {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

/// Invocations along `edge` inside the tick window fail with
/// `UnknownFunction`, as if the caller named a function that does not exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrongInvocation {
    pub edge: EdgeRef,
    pub window: Window,
}

/// Extra queue redeliveries of accepted requests for matching instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DuplicateDelivery {
    pub function_id_pattern: String,
    #[serde(default = "one")]
    pub copies: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct FaultPlan {
    pub outages: Vec<Outage>,
    pub crashes: Vec<CrashRule>,
    pub wrong_invocations: Vec<WrongInvocation>,
    pub duplicates: Vec<DuplicateDelivery>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, topology: &Topology) -> Result<(), SimError> {
        for o in &self.outages {
            if topology.platform(&o.platform_id).is_none() {
                return Err(SimError::InvalidPlan(format!(
                    "outage on unknown platform `{}`",
                    o.platform_id
                )));
            }
            if o.end_event < o.start_event {
                return Err(SimError::InvalidPlan("outage ends before it starts".into()));
            }
        }
        for pat in self
            .crashes
            .iter()
            .map(|c| &c.function_id_pattern)
            .chain(self.duplicates.iter().map(|d| &d.function_id_pattern))
        {
            glob_regex(pat)?;
        }
        Ok(())
    }
}

/// Compiles a glob (`*`, `?`) over local ids into an anchored regex.
pub fn glob_regex(pattern: &str) -> Result<Regex, SimError> {
    let mut re = String::from("^");
    for c in pattern.chars() {
        match c {
            '*' => re.push_str(".*"),
            '?' => re.push('.'),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push('$');
    Regex::new(&re).map_err(|e| SimError::InvalidPlan(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_matches_local_ids() {
        let r = glob_regex("B_*").unwrap();
        assert!(r.is_match("B_1"));
        assert!(r.is_match("B_3-bindex-1+0"));
        assert!(!r.is_match("AB_1"));
        assert!(glob_regex("E_3-bindex-1+0").unwrap().is_match("E_3-bindex-1+0"));
        assert!(!glob_regex("E_3-bindex-1+0").unwrap().is_match("E_3-bindex-110"));
    }

    #[test]
    fn plan_json_uses_documented_keys() {
        let plan: FaultPlan = serde_json::from_str(
            r#"{"outages":[{"platformId":"P2","startEvent":10,"endEvent":20}],
                "crashes":[{"functionIdPattern":"B_*","crashPoint":"mid-invoke-batch(2)","attempts":2}],
                "wrongInvocations":[{"edge":{"from":"A","to":"B"},"window":{"start":0,"end":5}}]}"#,
        )
        .unwrap();
        assert_eq!(plan.crashes[0].crash_point, CrashPoint::MidInvokeBatch(2));
        assert!(plan.outages[0].covers("P2", 10));
        assert!(!plan.outages[0].covers("P2", 20));
        plan.validate(&Topology::two_platform()).unwrap();
        let mut bad = plan.clone();
        bad.outages[0].platform_id = "P9".into();
        assert!(matches!(
            bad.validate(&Topology::two_platform()),
            Err(SimError::InvalidPlan(_))
        ));
    }
}
