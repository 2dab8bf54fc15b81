//! Log of every shim operation, with begin and end ticks.

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HistoryRecord {
    pub seq: u64,
    pub op: String,
    pub key: String,
    pub args: Value,
    pub result: Value,
    pub begin: u64,
    pub end: u64,
    /// Rendered id of the calling function instance.
    pub origin: String,
    /// `<platform>/<kind>` for datastore ops, `<platform>` for FaaS ops.
    pub target: String,
}

impl HistoryRecord {
    pub fn is_ok(&self) -> bool {
        self.result.get("err").is_none()
    }

    pub fn ok(&self) -> Option<&Value> {
        self.result.get("ok")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn push(&mut self, mut r: HistoryRecord) {
        r.seq = self.records.len() as u64;
        self.records.push(r);
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}
