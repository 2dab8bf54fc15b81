//! Globally unique function identifiers and the datastore keys derived from them.
//!
//! A function instance is identified by `(workflowId, name, step, branch)`. The
//! rendered form is `<workflowId>/<name>_<step>[-bindex-<levels>]`, where the
//! branch levels are written most-recent first and joined with `+`, so the
//! second map instance under branch 0 renders as `E_3-bindex-1+0`.
//!
//! Every checkpoint key of a run starts with `<workflowId>/`, which is what
//! garbage collection sweeps on.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OUTPUT_SUFFIX: &str = "-output";
pub const IVK_SUFFIX: &str = "-ivk";
pub const BITMAP_SUFFIX: &str = "-bitmap";
pub const REDUNDANT_SUFFIX: &str = "-redundant";
pub const COLLAB_NAMESPACE: &str = "collab/";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NamingError {
    #[error("fan-in participant has an empty branch stack")]
    EmptyStack,
    #[error("fan-in needs at least one participant")]
    NoParticipants,
    #[error("malformed function id `{0}`")]
    Malformed(String),
}

/// Branch stack of a function instance. Levels are stored oldest first; the
/// last element is the most recent fan-out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchStack(Vec<u32>);

impl BranchStack {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Builds a stack from levels listed oldest first.
    pub fn from_levels(levels: impl Into<Vec<u32>>) -> Self {
        Self(levels.into())
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self) -> Option<u32> {
        self.0.last().copied()
    }

    /// Rendered index sequence, most recent level first (`1+0`).
    pub fn render(&self) -> String {
        self.0.iter().rev().map(u32::to_string).collect::<Vec<_>>().join("+")
    }

    /// Returns the stack without its most recent level.
    pub fn popped(&self) -> Result<BranchStack, NamingError> {
        if self.0.is_empty() {
            return Err(NamingError::EmptyStack);
        }
        Ok(Self(self.0[..self.0.len() - 1].to_vec()))
    }

    /// Merge order: deeper stacks win, then indices compared from the most
    /// recent level downwards.
    fn merge_cmp(&self, other: &Self) -> Ordering {
        self.depth()
            .cmp(&other.depth())
            .then_with(|| self.0.iter().rev().cmp(other.0.iter().rev()))
    }
}

impl fmt::Display for BranchStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Fan-out: returns a new stack with `index` as the most recent level.
pub fn push_branch(stack: &BranchStack, index: u32) -> BranchStack {
    let mut levels = stack.0.clone();
    levels.push(index);
    BranchStack(levels)
}

/// Fan-in: pops one level from every participant stack and keeps the highest
/// (deepest, then largest index) of the popped stacks.
pub fn pop_and_merge(stacks: &[BranchStack]) -> Result<BranchStack, NamingError> {
    if stacks.is_empty() {
        return Err(NamingError::NoParticipants);
    }
    let popped = stacks.iter().map(BranchStack::popped).collect::<Result<Vec<_>, _>>()?;
    Ok(popped.into_iter().max_by(|a, b| a.merge_cmp(b)).expect("non-empty"))
}

/// Identity of one function instance within a workflow run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FunctionId {
    pub workflow_id: String,
    pub name: String,
    pub step: u32,
    pub branch: BranchStack,
}

impl FunctionId {
    /// The id without its `<workflowId>/` prefix, as drawn in figures and
    /// recorded in invocation lists.
    pub fn local(&self) -> String {
        render_local(&self.name, self.step, &self.branch)
    }

    pub fn render(&self) -> String {
        format!("{}/{}", self.workflow_id, self.local())
    }

    /// Inverse of [`FunctionId::render`].
    pub fn parse(rendered: &str) -> Result<FunctionId, NamingError> {
        let bad = || NamingError::Malformed(rendered.to_string());
        let (workflow_id, local) = rendered.rsplit_once('/').ok_or_else(bad)?;
        let (name, step, branch) = parse_local(local).ok_or_else(bad)?;
        if workflow_id.is_empty() {
            return Err(bad());
        }
        Ok(FunctionId {
            workflow_id: workflow_id.to_string(),
            name,
            step,
            branch,
        })
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.workflow_id, self.local())
    }
}

pub fn render_local(name: &str, step: u32, branch: &BranchStack) -> String {
    if branch.is_empty() {
        format!("{name}_{step}")
    } else {
        format!("{name}_{step}-bindex-{}", branch.render())
    }
}

fn parse_local(local: &str) -> Option<(String, u32, BranchStack)> {
    let (head, bindex) = match local.split_once("-bindex-") {
        Some((h, b)) => (h, Some(b)),
        None => (local, None),
    };
    let (name, step) = head.rsplit_once('_')?;
    if name.is_empty() || !is_valid_name(name) || step.is_empty() {
        return None;
    }
    if !step.bytes().all(|b| b.is_ascii_digit()) || (step.len() > 1 && step.starts_with('0')) {
        return None;
    }
    let step = step.parse().ok()?;
    let branch = match bindex {
        None => BranchStack::new(),
        Some(levels) => {
            let mut out = Vec::new();
            for part in levels.split('+') {
                if part.is_empty()
                    || !part.bytes().all(|b| b.is_ascii_digit())
                    || (part.len() > 1 && part.starts_with('0'))
                {
                    return None;
                }
                out.push(part.parse().ok()?);
            }
            out.reverse();
            BranchStack(out)
        }
    };
    Some((name.to_string(), step, branch))
}

/// Function names: ASCII alphanumerics, `_` and internal dots. The separators
/// `-`, `+` and `/` never appear, which keeps rendering injective.
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && !name.ends_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

pub fn compute_function_id(workflow_id: &str, name: &str, step: u32, branch: &BranchStack) -> FunctionId {
    FunctionId {
        workflow_id: workflow_id.to_string(),
        name: name.to_string(),
        step,
        branch: branch.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KeySet {
    pub output_key: String,
    pub ivk_key: String,
    pub bitmap_key: String,
}

pub fn derive_keys(id: &FunctionId) -> KeySet {
    let base = id.render();
    KeySet {
        output_key: format!("{base}{OUTPUT_SUFFIX}"),
        ivk_key: format!("{base}{IVK_SUFFIX}"),
        bitmap_key: format!("{base}{BITMAP_SUFFIX}"),
    }
}

/// Coordination list key for cross-workflow collaboration: the concatenated
/// names of the sub-graph under the collaboration namespace. Not prefixed by
/// any workflow id, so run GC leaves it alone.
pub fn collab_key(names: &[&str]) -> String {
    format!("{COLLAB_NAMESPACE}{}", names.join("+"))
}

/// Replica coordination key within one run, keyed by the instance the
/// winning replica will invoke.
pub fn redundant_key(successor: &FunctionId) -> String {
    format!("{}{REDUNDANT_SUFFIX}", successor.render())
}

/// Prefix shared by every key a run writes.
pub fn workflow_prefix(workflow_id: &str) -> String {
    format!("{workflow_id}/")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bs(levels: &[u32]) -> BranchStack {
        BranchStack::from_levels(levels.to_vec())
    }

    #[test]
    fn push_appends_most_recent_level() {
        assert_eq!(push_branch(&bs(&[]), 0), bs(&[0]));
        let one = bs(&[1]);
        let pushed = push_branch(&one, 0);
        assert_eq!(pushed, bs(&[1, 0]));
        assert_eq!(one, bs(&[1]));
        assert_eq!(push_branch(&bs(&[0]), 1), bs(&[0, 1]));
        // second map instance under branch 0
        assert_eq!(push_branch(&bs(&[0]), 1).render(), "1+0");
    }

    #[test]
    fn figure_ids_render() {
        let w = "w";
        assert_eq!(compute_function_id(w, "C", 2, &bs(&[0])).render(), "w/C_2-bindex-0");
        assert_eq!(compute_function_id(w, "D", 2, &bs(&[1])).render(), "w/D_2-bindex-1");
        assert_eq!(compute_function_id(w, "A", 0, &bs(&[])).render(), "w/A_0");
        assert_eq!(compute_function_id(w, "E", 3, &bs(&[0, 0])).local(), "E_3-bindex-0+0");
        assert_eq!(compute_function_id(w, "E", 3, &bs(&[0, 1])).local(), "E_3-bindex-1+0");
        assert_eq!(compute_function_id(w, "F", 3, &bs(&[1])).local(), "F_3-bindex-1");
    }

    #[test]
    fn pop_and_merge_figure_example() {
        // E_3-bindex-0+0, E_3-bindex-1+0, F_3-bindex-1
        let merged = pop_and_merge(&[bs(&[0, 0]), bs(&[0, 1]), bs(&[1])]).unwrap();
        assert_eq!(merged, bs(&[0]));
    }

    #[test]
    fn pop_and_merge_edge_cases() {
        assert_eq!(pop_and_merge(&[bs(&[5])]).unwrap(), bs(&[]));
        assert_eq!(pop_and_merge(&[bs(&[2]), bs(&[0]), bs(&[1])]).unwrap(), bs(&[]));
        assert_eq!(pop_and_merge(&[bs(&[1]), bs(&[])]), Err(NamingError::EmptyStack));
        assert_eq!(pop_and_merge(&[]), Err(NamingError::NoParticipants));
        // nested fan-in inside outer branch 1 keeps the outer level
        assert_eq!(pop_and_merge(&[bs(&[1, 0]), bs(&[1, 1])]).unwrap(), bs(&[1]));
    }

    #[test]
    fn keys_use_suffixes_and_prefix() {
        let id = FunctionId::parse("w/C_2-bindex-0").unwrap();
        assert_eq!(derive_keys(&id).output_key, "w/C_2-bindex-0-output");
        let id = FunctionId::parse("w/data_map_1").unwrap();
        assert_eq!(id.name, "data_map");
        assert_eq!(derive_keys(&id).ivk_key, "w/data_map_1-ivk");
        let agg = compute_function_id("w", "D", 3, &bs(&[]));
        assert_eq!(derive_keys(&agg).bitmap_key, "w/D_3-bitmap");
        let ks = derive_keys(&agg);
        for k in [ks.output_key, ks.ivk_key, ks.bitmap_key] {
            assert!(k.starts_with(&workflow_prefix("w")));
        }
        assert_eq!(collab_key(&["A", "B"]), "collab/A+B");
    }

    #[test]
    fn parse_rejects_garbage() {
        for s in [
            "",
            "w/",
            "w/A",
            "w/A_x",
            "/A_0",
            "w/A_0-bindex-",
            "w/A_0-bindex-1++2",
            "w/A_01",
        ] {
            assert!(FunctionId::parse(s).is_err(), "{s}");
        }
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9_]{0,6}"
    }

    proptest! {
        #[test]
        fn render_is_injective(
            n1 in name_strategy(), s1 in 0u32..20, b1 in proptest::collection::vec(0u32..12, 0..4),
            n2 in name_strategy(), s2 in 0u32..20, b2 in proptest::collection::vec(0u32..12, 0..4),
        ) {
            let a = compute_function_id("w", &n1, s1, &BranchStack::from_levels(b1));
            let b = compute_function_id("w", &n2, s2, &BranchStack::from_levels(b2));
            prop_assert_eq!(FunctionId::parse(&a.render()).unwrap(), a.clone());
            if a.render() == b.render() {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn pop_and_merge_is_permutation_invariant(
            stacks in proptest::collection::vec(proptest::collection::vec(0u32..4, 1..4), 1..6),
            seed in any::<u64>(),
        ) {
            let stacks: Vec<BranchStack> = stacks.into_iter().map(BranchStack::from_levels).collect();
            let mut shuffled = stacks.clone();
            // deterministic Fisher-Yates from the seed
            let mut x = seed | 1;
            for i in (1..shuffled.len()).rev() {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                shuffled.swap(i, (x % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(pop_and_merge(&stacks).unwrap(), pop_and_merge(&shuffled).unwrap());
        }
    }
}
