//! Brute-force linearizability check of datastore histories.
//!
//! Each `(store, key)` is an independent object. A history is linearizable
//! when some total order of its successful operations respects real time
//! (`a.end < b.begin` puts `a` first) and replays against the sequential
//! store model with identical results. Failed operations have no effect in
//! the store model and are skipped. Scans span keys and are not checked.

use std::collections::{BTreeMap, HashSet};

use serde_json::{json, Value};
use thiserror::Error;

use super::history::{History, HistoryRecord};

/// Search states explored per key before giving up.
pub const STATE_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinError {
    #[error("history of `{store}:{key}` ({ops} ops) is not linearizable")]
    NotLinearizable { store: String, key: String, ops: usize },
    #[error("search budget exhausted for `{store}:{key}`")]
    Inconclusive { store: String, key: String },
    #[error("unsupported operation `{0}`")]
    UnknownOp(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinSummary {
    pub keys: usize,
    pub ops: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Abs {
    Item { digest: String, len: u64 },
    List(Vec<String>),
    Bitmap { bits: Vec<bool>, completed_by: Option<u64> },
}

fn show(v: &Option<Abs>) -> Value {
    match v {
        None => Value::Null,
        Some(Abs::Item { digest, len }) => json!({"type": "item", "digest": digest, "len": len}),
        Some(Abs::List(l)) => json!({"type": "list", "value": l}),
        Some(Abs::Bitmap { bits, completed_by }) => {
            json!({"type": "bitmap", "bits": bits, "completedBy": completed_by})
        }
    }
}

const DATASTORE_OPS: [&str; 7] = [
    "store_output_data",
    "get_value",
    "create_invocation_list",
    "append_and_get_list",
    "create_bitmap",
    "update_bitmap",
    "delete",
];

/// Applies `r` to `state`; returns the result the sequential model gives,
/// or `None` when the model would fail where the record succeeded.
fn apply(r: &HistoryRecord, state: &Option<Abs>) -> Result<Option<(Value, Option<Abs>)>, LinError> {
    let create = |v: Abs| match state {
        Some(_) => Some((json!(false), state.clone())),
        None => Some((json!(true), Some(v))),
    };
    Ok(match r.op.as_str() {
        "store_output_data" => create(Abs::Item {
            digest: r.args["digest"].as_str().unwrap_or_default().to_string(),
            len: r.args["len"].as_u64().unwrap_or_default(),
        }),
        "get_value" => Some((show(state), state.clone())),
        "create_invocation_list" => create(Abs::List(Vec::new())),
        "create_bitmap" => {
            let n = r.args["size"].as_u64().unwrap_or_default() as usize;
            create(Abs::Bitmap {
                bits: vec![false; n],
                completed_by: None,
            })
        }
        "append_and_get_list" => match state {
            Some(Abs::List(l)) => {
                let mut l = l.clone();
                for n in r.args["names"].as_array().into_iter().flatten() {
                    let n = n.as_str().unwrap_or_default().to_string();
                    if !l.contains(&n) {
                        l.push(n);
                    }
                }
                Some((json!(l), Some(Abs::List(l))))
            }
            _ => None,
        },
        "update_bitmap" => match state {
            Some(Abs::Bitmap { bits, completed_by }) => {
                let i = r.args["index"].as_u64().unwrap_or(u64::MAX) as usize;
                if i >= bits.len() {
                    return Ok(None);
                }
                let mut bits = bits.clone();
                let mut completed_by = *completed_by;
                if !bits[i] {
                    bits[i] = true;
                    if bits.iter().all(|b| *b) {
                        completed_by = Some(i as u64);
                    }
                }
                let next = Some(Abs::Bitmap { bits, completed_by });
                Some((show(&next), next))
            }
            _ => None,
        },
        "delete" => Some((json!(state.is_some()), None)),
        other => return Err(LinError::UnknownOp(other.to_string())),
    })
}

struct Search<'a> {
    ops: Vec<&'a HistoryRecord>,
    seen: HashSet<(Vec<u64>, Option<Abs>)>,
}

impl Search<'_> {
    fn run(&mut self, done: &mut Vec<u64>, left: usize, state: &Option<Abs>) -> Result<bool, ()> {
        if left == 0 {
            return Ok(true);
        }
        if !self.seen.insert((done.clone(), state.clone())) {
            return Ok(false);
        }
        if self.seen.len() > STATE_BUDGET {
            return Err(());
        }
        let is_done = |d: &Vec<u64>, i: usize| d[i / 64] >> (i % 64) & 1 == 1;
        // Ops are sorted by begin, so the earliest pending end bounds the
        // candidates: nothing beginning after it may go first.
        let horizon = (0..self.ops.len())
            .filter(|i| !is_done(done, *i))
            .map(|i| self.ops[i].end)
            .min()
            .unwrap_or(u64::MAX);
        for i in 0..self.ops.len() {
            if is_done(done, i) {
                continue;
            }
            let r = self.ops[i];
            if r.begin > horizon {
                break;
            }
            let Ok(Some((result, next))) = apply(r, state) else {
                continue;
            };
            if r.ok() != Some(&result) {
                continue;
            }
            done[i / 64] |= 1 << (i % 64);
            let found = self.run(done, left - 1, &next)?;
            done[i / 64] &= !(1 << (i % 64));
            if found {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Checks one object's successful operations.
pub fn check_object(records: &[&HistoryRecord]) -> Result<bool, LinError> {
    let mut ops: Vec<&HistoryRecord> = records.iter().copied().filter(|r| r.is_ok()).collect();
    for r in &ops {
        apply(r, &None)?;
    }
    ops.sort_by_key(|r| (r.begin, r.end, r.seq));
    let n = ops.len();
    let mut s = Search {
        ops,
        seen: HashSet::new(),
    };
    let mut done = vec![0u64; n.div_ceil(64).max(1)];
    s.run(&mut done, n, &None).map_err(|_| LinError::Inconclusive {
        store: records.first().map(|r| r.target.clone()).unwrap_or_default(),
        key: records.first().map(|r| r.key.clone()).unwrap_or_default(),
    })
}

/// Checks every datastore object in the history.
pub fn check_history(history: &History) -> Result<LinSummary, LinError> {
    let mut objects: BTreeMap<(&str, &str), Vec<&HistoryRecord>> = BTreeMap::new();
    for r in &history.records {
        if DATASTORE_OPS.contains(&r.op.as_str()) {
            objects.entry((r.target.as_str(), r.key.as_str())).or_default().push(r);
        }
    }
    let mut summary = LinSummary::default();
    for ((store, key), recs) in &objects {
        if !check_object(recs)? {
            return Err(LinError::NotLinearizable {
                store: store.to_string(),
                key: key.to_string(),
                ops: recs.len(),
            });
        }
        summary.keys += 1;
        summary.ops += recs.len();
    }
    Ok(summary)
}
