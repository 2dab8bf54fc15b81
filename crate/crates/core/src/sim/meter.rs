//! Operation metering per function instance.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Counters of one function instance. Table ops count as `writes`/`reads`,
/// object-store ops as `objectWrites`/`objectReads`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OpCounts {
    pub writes: u64,
    pub reads: u64,
    pub object_writes: u64,
    pub object_reads: u64,
    /// Invocation attempts, failed ones included.
    pub invokes: u64,
    pub cross_cloud_transfers: u64,
    pub ds_creates: u64,
    pub faas_creates: u64,
    pub deletes: u64,
    pub scans: u64,
}

impl OpCounts {
    /// Datastore writes of both store kinds.
    pub fn w(&self) -> u64 {
        self.writes + self.object_writes
    }

    /// Datastore reads of both store kinds.
    pub fn r(&self) -> u64 {
        self.reads + self.object_reads
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.writes += o.writes;
        self.reads += o.reads;
        self.object_writes += o.object_writes;
        self.object_reads += o.object_reads;
        self.invokes += o.invokes;
        self.cross_cloud_transfers += o.cross_cloud_transfers;
        self.ds_creates += o.ds_creates;
        self.faas_creates += o.faas_creates;
        self.deletes += o.deletes;
        self.scans += o.scans;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counter {
    Write,
    Read,
    ObjectWrite,
    ObjectRead,
    Invoke,
    DsCreate,
    FaasCreate,
    Delete,
    Scan,
}

/// Counters keyed by rendered function id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meter {
    pub per_function: BTreeMap<String, OpCounts>,
}

impl Meter {
    pub fn bump(&mut self, origin: &str, counter: Counter, cross_cloud: bool) {
        let c = self.per_function.entry(origin.to_string()).or_default();
        match counter {
            Counter::Write => c.writes += 1,
            Counter::Read => c.reads += 1,
            Counter::ObjectWrite => c.object_writes += 1,
            Counter::ObjectRead => c.object_reads += 1,
            Counter::Invoke => c.invokes += 1,
            Counter::DsCreate => c.ds_creates += 1,
            Counter::FaasCreate => c.faas_creates += 1,
            Counter::Delete => c.deletes += 1,
            Counter::Scan => c.scans += 1,
        }
        if cross_cloud {
            c.cross_cloud_transfers += 1;
        }
    }

    pub fn get(&self, origin: &str) -> OpCounts {
        self.per_function.get(origin).copied().unwrap_or_default()
    }

    pub fn total(&self) -> OpCounts {
        let mut t = OpCounts::default();
        for c in self.per_function.values() {
            t += *c;
        }
        t
    }

    /// Sum over all instances of a workflow run.
    pub fn run_total(&self, workflow_id: &str) -> OpCounts {
        let prefix = format!("{workflow_id}/");
        let mut t = OpCounts::default();
        for (k, c) in &self.per_function {
            if k.starts_with(&prefix) {
                t += *c;
            }
        }
        t
    }
}
