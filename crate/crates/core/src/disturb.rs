//! Tree-based disturbance of ground-truth expressions.
//!
//! Four rewrites produce near-miss candidates from a correct solution tree:
//! expand a leaf into a small subtree, edit one node in place, delete a leaf
//! (promoting its sibling), or swap the children of an operator. Each candidate
//! is labeled by comparing its exact value with the ground truth.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{Label, LabeledExpression, Provenance};
use crate::exprcore::{evaluate, results_equal, ExprTree, MappedProblem, Op, Operand};

/// Redraws allowed per requested candidate when a draw is inapplicable or a duplicate.
pub const RETRY_BUDGET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    Expand,
    Edit,
    Delete,
    Swap,
}

impl DisturbanceKind {
    pub const ALL: [DisturbanceKind; 4] =
        [DisturbanceKind::Expand, DisturbanceKind::Edit, DisturbanceKind::Delete, DisturbanceKind::Swap];

    pub fn name(self) -> &'static str {
        match self {
            DisturbanceKind::Expand => "expand",
            DisturbanceKind::Edit => "edit",
            DisturbanceKind::Delete => "delete",
            DisturbanceKind::Swap => "swap",
        }
    }
}

impl fmt::Display for DisturbanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DisturbanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DisturbanceKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown disturbance kind '{s}' (expected expand, edit, delete or swap)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Steps from the root to a node.
pub type NodePath = Vec<Side>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisturbanceOutcome {
    pub tree: ExprTree,
    pub kind: DisturbanceKind,
    pub site: NodePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisturbError {
    #[error("tree is a single leaf")]
    TooSmall,
    #[error("the chosen node has no legal replacement")]
    NoAlternative,
}

/// All node paths in pre-order, each tagged with whether it is a leaf.
fn node_paths(tree: &ExprTree) -> Vec<(NodePath, bool)> {
    fn walk(tree: &ExprTree, path: &mut NodePath, out: &mut Vec<(NodePath, bool)>) {
        match tree {
            ExprTree::Leaf(_) => out.push((path.clone(), true)),
            ExprTree::Node { left, right, .. } => {
                out.push((path.clone(), false));
                path.push(Side::Left);
                walk(left, path, out);
                path.pop();
                path.push(Side::Right);
                walk(right, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, &mut Vec::new(), &mut out);
    out
}

fn leaf_paths(tree: &ExprTree) -> Vec<NodePath> {
    node_paths(tree).into_iter().filter(|(_, leaf)| *leaf).map(|(p, _)| p).collect()
}

fn operator_paths(tree: &ExprTree) -> Vec<NodePath> {
    node_paths(tree).into_iter().filter(|(_, leaf)| !*leaf).map(|(p, _)| p).collect()
}

pub fn subtree_at<'a>(tree: &'a ExprTree, path: &[Side]) -> Option<&'a ExprTree> {
    let mut node = tree;
    for side in path {
        match node {
            ExprTree::Leaf(_) => return None,
            ExprTree::Node { left, right, .. } => {
                node = match side {
                    Side::Left => left,
                    Side::Right => right,
                }
            }
        }
    }
    Some(node)
}

/// Copy of `tree` with the subtree at `path` replaced by `f(old subtree)`.
fn rewrite_at(tree: &ExprTree, path: &[Side], f: impl FnOnce(&ExprTree) -> ExprTree) -> ExprTree {
    match path.split_first() {
        None => f(tree),
        Some((side, rest)) => match tree {
            ExprTree::Leaf(_) => panic!("path descends below a leaf"),
            ExprTree::Node { op, left, right } => match side {
                Side::Left => ExprTree::node(*op, rewrite_at(left, rest, f), (**right).clone()),
                Side::Right => ExprTree::node(*op, (**left).clone(), rewrite_at(right, rest, f)),
            },
        },
    }
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Replace a uniformly chosen leaf `L` by `op(L, n)` or `op(n, L)`.
///
/// `op` is uniform over the four operators and `n` uniform over the problem's
/// `num_count` number tokens.
pub fn expand<R: Rng + ?Sized>(tree: &ExprTree, num_count: usize, rng: &mut R) -> Result<DisturbanceOutcome, DisturbError> {
    if num_count == 0 {
        return Err(DisturbError::NoAlternative);
    }
    let leaves = leaf_paths(tree);
    let site = pick(rng, &leaves).clone();
    let op = Op::ALL[rng.gen_range(0..Op::ALL.len())];
    let number = ExprTree::num(rng.gen_range(0..num_count));
    let leaf_on_left = rng.gen_bool(0.5);
    let tree = rewrite_at(tree, &site, |leaf| {
        if leaf_on_left {
            ExprTree::node(op, leaf.clone(), number)
        } else {
            ExprTree::node(op, number, leaf.clone())
        }
    });
    Ok(DisturbanceOutcome { tree, kind: DisturbanceKind::Expand, site })
}

/// Change one uniformly chosen node into another of the same kind.
///
/// Number leaves become a different `NUM` token of the problem, operators a
/// different operator. The shape of the tree is unchanged.
pub fn edit<R: Rng + ?Sized>(tree: &ExprTree, num_count: usize, rng: &mut R) -> Result<DisturbanceOutcome, DisturbError> {
    let nodes = node_paths(tree);
    let (site, _) = pick(rng, &nodes).clone();
    let target = subtree_at(tree, &site).expect("path comes from the tree");
    let replacement = match target {
        ExprTree::Leaf(operand) => {
            let alternatives: Vec<usize> = match operand {
                Operand::Num(current) => (0..num_count).filter(|i| i != current).collect(),
                Operand::Const(_) => (0..num_count).collect(),
            };
            if alternatives.is_empty() {
                return Err(DisturbError::NoAlternative);
            }
            ExprTree::num(*pick(rng, &alternatives))
        }
        ExprTree::Node { op, left, right } => {
            let others: Vec<Op> = Op::ALL.into_iter().filter(|o| o != op).collect();
            ExprTree::Node { op: *pick(rng, &others), left: left.clone(), right: right.clone() }
        }
    };
    let tree = rewrite_at(tree, &site, |_| replacement);
    Ok(DisturbanceOutcome { tree, kind: DisturbanceKind::Edit, site })
}

/// Remove a uniformly chosen leaf and put its sibling in place of the parent.
pub fn delete<R: Rng + ?Sized>(tree: &ExprTree, rng: &mut R) -> Result<DisturbanceOutcome, DisturbError> {
    if tree.is_leaf() {
        return Err(DisturbError::TooSmall);
    }
    let leaves = leaf_paths(tree);
    let site = pick(rng, &leaves).clone();
    let (last, parent) = site.split_last().expect("a non-root leaf has a parent");
    let tree = rewrite_at(tree, parent, |node| match node {
        ExprTree::Node { left, right, .. } => match last {
            Side::Left => (**right).clone(),
            Side::Right => (**left).clone(),
        },
        ExprTree::Leaf(_) => unreachable!("parent of a leaf is an operator"),
    });
    Ok(DisturbanceOutcome { tree, kind: DisturbanceKind::Delete, site })
}

/// Exchange the children of a uniformly chosen operator node.
pub fn swap<R: Rng + ?Sized>(tree: &ExprTree, rng: &mut R) -> Result<DisturbanceOutcome, DisturbError> {
    let operators = operator_paths(tree);
    if operators.is_empty() {
        return Err(DisturbError::TooSmall);
    }
    let site = pick(rng, &operators).clone();
    let tree = rewrite_at(tree, &site, |node| match node {
        ExprTree::Node { op, left, right } => ExprTree::Node { op: *op, left: right.clone(), right: left.clone() },
        ExprTree::Leaf(_) => unreachable!("operator paths point at operators"),
    });
    Ok(DisturbanceOutcome { tree, kind: DisturbanceKind::Swap, site })
}

pub fn apply<R: Rng + ?Sized>(
    kind: DisturbanceKind,
    tree: &ExprTree,
    num_count: usize,
    rng: &mut R,
) -> Result<DisturbanceOutcome, DisturbError> {
    match kind {
        DisturbanceKind::Expand => expand(tree, num_count, rng),
        DisturbanceKind::Edit => edit(tree, num_count, rng),
        DisturbanceKind::Delete => delete(tree, rng),
        DisturbanceKind::Swap => swap(tree, rng),
    }
}

/// Draw up to `count` labeled candidates by disturbing the problem's ground truth.
///
/// Every draw starts from the original ground truth with a uniformly random kind.
/// Inapplicable draws and duplicates (of the ground truth or earlier outcomes) are
/// redrawn up to [`RETRY_BUDGET`] times, then the slot is skipped.
pub fn disturb_candidates<R: Rng + ?Sized>(problem: &MappedProblem, count: usize, rng: &mut R) -> Vec<LabeledExpression> {
    let Ok(truth) = problem.ground_truth_value() else {
        return Vec::new();
    };
    let num_count = problem.numbers.len();
    let mut seen: HashSet<String> = HashSet::from([problem.ground_truth.to_infix()]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..=RETRY_BUDGET {
            let kind = DisturbanceKind::ALL[rng.gen_range(0..DisturbanceKind::ALL.len())];
            let Ok(outcome) = apply(kind, &problem.ground_truth, num_count, rng) else {
                continue;
            };
            let key = outcome.tree.to_infix();
            if seen.contains(&key) {
                continue;
            }
            let Ok(value) = evaluate(&outcome.tree, &problem.numbers) else {
                continue;
            };
            seen.insert(key);
            out.push(LabeledExpression {
                expr: outcome.tree,
                label: Label::from_correct(results_equal(&value, &truth)),
                provenance: Provenance::Disturbance,
                score_hint: None,
            });
            break;
        }
    }
    out
}
