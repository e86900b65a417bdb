#![allow(dead_code)]

use std::collections::BTreeMap;

use genrank::exprcore::{ExprTree, ExprValue, Op, Operand};
use genrank::pipeline::Verdict;
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

/// Unreduced fraction; equality by cross-multiplication.
#[derive(Debug, Clone)]
pub struct Frac {
    pub n: BigInt,
    pub d: BigInt,
}

impl Frac {
    pub fn int(v: i64) -> Frac {
        Frac { n: BigInt::from(v), d: BigInt::one() }
    }

    pub fn same(&self, other: &Frac) -> bool {
        &self.n * &other.d == &other.n * &self.d
    }
}

/// Straightforward recursive evaluation over integer leaves. `None` on a zero divisor.
pub fn brute_eval(tree: &ExprTree, numbers: &[i64]) -> Option<Frac> {
    match tree {
        ExprTree::Leaf(Operand::Num(i)) => Some(Frac::int(numbers[*i])),
        ExprTree::Leaf(Operand::Const(c)) => {
            let v = c.value();
            Some(Frac { n: v.numer().clone(), d: v.denom().clone() })
        }
        ExprTree::Node { op, left, right } => {
            let a = brute_eval(left, numbers)?;
            let b = brute_eval(right, numbers)?;
            Some(match op {
                Op::Add => Frac { n: &a.n * &b.d + &b.n * &a.d, d: &a.d * &b.d },
                Op::Sub => Frac { n: &a.n * &b.d - &b.n * &a.d, d: &a.d * &b.d },
                Op::Mul => Frac { n: &a.n * &b.n, d: &a.d * &b.d },
                Op::Div if b.n.is_zero() => return None,
                Op::Div => {
                    let (n, d) = (&a.n * &b.d, &a.d * &b.n);
                    if d.is_negative() {
                        Frac { n: -n, d: -d }
                    } else {
                        Frac { n, d }
                    }
                }
            })
        }
    }
}

pub fn agrees(value: &ExprValue, oracle: &Option<Frac>) -> bool {
    match (value, oracle) {
        (ExprValue::Undefined, None) => true,
        (ExprValue::Defined(v), Some(f)) => f.same(&Frac { n: v.numer().clone(), d: v.denom().clone() }),
        _ => false,
    }
}

pub fn leaves(tree: &ExprTree) -> usize {
    match tree {
        ExprTree::Leaf(_) => 1,
        ExprTree::Node { left, right, .. } => leaves(left) + leaves(right),
    }
}

/// Accuracy figures recomputed from verdict lines, keyed by operator count (0 = overall).
pub fn recount(verdicts: &[serde_json::Value]) -> BTreeMap<usize, [usize; 4]> {
    let mut counts: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for v in verdicts {
        let ops = v["op_count"].as_u64().unwrap() as usize;
        for key in [0, ops] {
            let c = counts.entry(key).or_default();
            c[0] += 1;
            c[1] += v["correct"].as_bool().unwrap() as usize;
            c[2] += v["top1_correct"].as_bool().unwrap() as usize;
            c[3] += v["oracle_correct"].as_bool().unwrap() as usize;
        }
    }
    counts
}

/// Compare a JSON report against counts from [`recount`]; returns the mismatches.
pub fn report_mismatches(report: &serde_json::Value, counts: &BTreeMap<usize, [usize; 4]>) -> Vec<String> {
    fn check(problems: &mut Vec<String>, label: String, tally: &serde_json::Value, c: &[usize; 4]) {
        let fields = [("problems", c[0]), ("correct", c[1]), ("top1_correct", c[2]), ("oracle_correct", c[3])];
        for (name, expected) in fields {
            if tally[name].as_u64() != Some(expected as u64) {
                problems.push(format!("{label}.{name}: {} vs {expected}", tally[name]));
            }
        }
        let ratio = |n: usize| if c[0] == 0 { 0.0 } else { n as f64 / c[0] as f64 };
        let rates = [("accuracy", ratio(c[1])), ("top1_accuracy", ratio(c[2])), ("oracle_accuracy", ratio(c[3]))];
        for (name, expected) in rates {
            if tally[name].as_f64() != Some(expected) {
                problems.push(format!("{label}.{name}: {} vs {expected}", tally[name]));
            }
        }
    }
    let mut problems = Vec::new();
    if let Some(all) = counts.get(&0) {
        check(&mut problems, "overall".into(), report, all);
    }
    let by_op = report["by_op_count"].as_object().cloned().unwrap_or_default();
    let keys: Vec<usize> = counts.keys().copied().filter(|&k| k > 0).collect();
    if by_op.len() != keys.len() {
        problems.push(format!("by_op_count has {} groups, expected {}", by_op.len(), keys.len()));
    }
    for k in keys {
        match by_op.get(&k.to_string()) {
            Some(t) => check(&mut problems, format!("by_op_count.{k}"), t, &counts[&k]),
            None => problems.push(format!("by_op_count.{k} missing")),
        }
    }
    problems
}

pub fn verdict_values(verdicts: &[Verdict]) -> Vec<serde_json::Value> {
    verdicts.iter().map(|v| serde_json::to_value(v).unwrap()).collect()
}
