//! Helpers shared by the integration tests.
#![allow(dead_code)]

use proptest::prelude::*;
use serde_json::{json, Map, Value};

use crossflow::ir::{compile_subgraphs, parse_workflow_def, SubGraphSet, WorkflowDef};
use crossflow::runtime::{Registry, RuntimeConfig};
use crossflow::sim::oracle::Workload;
use crossflow::sim::Topology;

pub fn compile(v: &Value) -> (WorkflowDef, SubGraphSet) {
    let def = parse_workflow_def(&v.to_string()).unwrap_or_else(|e| panic!("{e:?}\n{v:#}"));
    let set = compile_subgraphs(&def).unwrap_or_else(|e| panic!("{e:?}\n{v:#}"));
    (def, set)
}

pub fn workload(v: &Value, topology: Topology, cfg: RuntimeConfig, seed: u64) -> Workload {
    let (def, set) = compile(v);
    Workload {
        topology,
        set,
        registry: Registry::new(),
        cfg,
        entry: def.entry.clone(),
        input: vec![7u8; 1024],
        seed,
    }
}

/// One structural block of a generated workflow.
#[derive(Debug, Clone)]
pub enum Block {
    Seq,
    /// Parallel branches, each a chain of the given length or, for `None`,
    /// a node mapping over one worker with its own inner fan-in.
    Par(Vec<Option<u32>>, u32),
    /// Map of `width` over a chain of `len` nodes, then a fan-in.
    Map {
        width: u32,
        len: u32,
    },
    /// Loop over a chain of `len` nodes, `bound` iterations, then an exit node.
    Cycle {
        len: u32,
        bound: u32,
    },
}

/// Instances a block contributes, counted from its shape alone.
pub fn block_instances(b: &Block) -> u32 {
    match b {
        Block::Seq => 1,
        Block::Par(branches, inner) => {
            1 + branches
                .iter()
                .map(|br| match br {
                    Some(l) => *l,
                    None => 1 + inner + 1,
                })
                .sum::<u32>()
        }
        Block::Map { width, len } => width * len + 1,
        Block::Cycle { len, bound } => len * bound + 1,
    }
}

pub fn block_strategy() -> impl Strategy<Value = Block> {
    prop_oneof![
        Just(Block::Seq),
        (
            prop::collection::vec(prop::option::weighted(0.75, 1u32..=3), 2..=4),
            1u32..=3
        )
            .prop_map(|(b, w)| Block::Par(b, w)),
        (1u32..=8, 1u32..=2).prop_map(|(width, len)| Block::Map { width, len }),
        (1u32..=3, 1u32..=4).prop_map(|(len, bound)| Block::Cycle { len, bound }),
    ]
}

/// Generated workflow with at most `max` instances (trailing blocks are
/// dropped until it fits), its expected instance count, and its document.
pub fn dag_strategy(max: u32) -> impl Strategy<Value = (Value, u32)> {
    (
        prop::collection::vec(block_strategy(), 1..=5),
        prop::collection::vec(any::<bool>(), 64),
    )
        .prop_map(move |(mut blocks, coins)| {
            while 1 + blocks.iter().map(block_instances).sum::<u32>() > max {
                blocks.pop();
            }
            let n = 1 + blocks.iter().map(block_instances).sum::<u32>();
            (build(&blocks, &coins), n)
        })
}

struct Builder<'a> {
    functions: Map<String, Value>,
    edges: Vec<Value>,
    coins: &'a [bool],
    next: usize,
}

impl Builder<'_> {
    fn node(&mut self, prefix: &str) -> String {
        let name = format!("{prefix}{}", self.next);
        let platform = if self.coins[self.next % self.coins.len()] {
            "P1"
        } else {
            "P2"
        };
        self.next += 1;
        self.functions.insert(name.clone(), json!({ "platform": platform }));
        name
    }

    fn edge(&mut self, from: &str, to: &str, mode: &str, params: Value) {
        self.edges
            .push(json!({"from": from, "to": to, "mode": mode, "params": params}));
    }

    fn chain(&mut self, from: &str, mode: &str, params: Value, len: u32, prefix: &str) -> (String, String) {
        let first = self.node(prefix);
        self.edge(from, &first, mode, params);
        let mut last = first.clone();
        for _ in 1..len {
            let n = self.node(prefix);
            self.edge(&last, &n, "sequence", json!({}));
            last = n;
        }
        (first, last)
    }
}

pub fn build(blocks: &[Block], coins: &[bool]) -> Value {
    let mut b = Builder {
        functions: Map::new(),
        edges: Vec::new(),
        coins,
        next: 0,
    };
    let entry = b.node("n");
    let mut cur = entry.clone();
    for block in blocks {
        match block {
            Block::Seq => {
                let n = b.node("s");
                b.edge(&cur, &n, "sequence", json!({}));
                cur = n;
            }
            Block::Par(branches, inner) => {
                let mut lasts = Vec::new();
                for br in branches {
                    match br {
                        Some(len) => lasts.push(b.chain(&cur, "parallel", json!({}), *len, "p").1),
                        None => {
                            let (head, _) = b.chain(&cur, "parallel", json!({}), 1, "q");
                            let (_, worker) = b.chain(&head, "map", json!({"width": inner}), 1, "w");
                            let join = b.node("k");
                            b.edge(&worker, &join, "fanin", json!({}));
                            lasts.push(join);
                        }
                    }
                }
                let join = b.node("j");
                for l in lasts {
                    b.edge(&l, &join, "fanin", json!({}));
                }
                cur = join;
            }
            Block::Map { width, len } => {
                let (_, last) = b.chain(&cur, "map", json!({ "width": width }), *len, "m");
                let join = b.node("j");
                b.edge(&last, &join, "fanin", json!({}));
                cur = join;
            }
            Block::Cycle { len, bound } => {
                let (head, tail) = b.chain(&cur, "sequence", json!({}), *len, "c");
                b.edge(&tail, &head, "cycle", json!({ "bound": bound }));
                let exit = b.node("x");
                b.edge(&tail, &exit, "sequence", json!({}));
                cur = exit;
            }
        }
    }
    json!({
        "name": "generated",
        "platforms": {"P1": {"payloadLimitBytes": 262144}, "P2": {"payloadLimitBytes": 131072}},
        "functions": b.functions,
        "edges": b.edges,
        "entry": entry,
        "terminal": cur,
    })
}
