//! Accuracy evaluation with per-problem verdicts.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::exprcore::{results_equal, MappedProblem};
use crate::model::Model;

use super::beam::beam_search;
use super::solve::{interpret, solve_from_beams};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub problem_id: String,
    pub op_count: usize,
    pub ground_truth: String,
    /// Ranked choice; absent when no candidate was valid.
    pub predicted: Option<String>,
    pub correct: bool,
    /// First beam hypothesis, as generated.
    pub top1: Option<String>,
    pub top1_correct: bool,
    pub oracle_correct: bool,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub problems: usize,
    pub correct: usize,
    pub top1_correct: usize,
    pub oracle_correct: usize,
    pub accuracy: f64,
    pub top1_accuracy: f64,
    pub oracle_accuracy: f64,
}

impl Tally {
    fn from_counts(problems: usize, correct: usize, top1_correct: usize, oracle_correct: usize) -> Tally {
        let ratio = |n: usize| if problems == 0 { 0.0 } else { n as f64 / problems as f64 };
        Tally {
            problems,
            correct,
            top1_correct,
            oracle_correct,
            accuracy: ratio(correct),
            top1_accuracy: ratio(top1_correct),
            oracle_accuracy: ratio(oracle_correct),
        }
    }

    fn from_verdicts<'a>(verdicts: impl Iterator<Item = &'a Verdict>) -> Tally {
        let (mut n, mut c, mut t, mut o) = (0, 0, 0, 0);
        for v in verdicts {
            n += 1;
            c += usize::from(v.correct);
            t += usize::from(v.top1_correct);
            o += usize::from(v.oracle_correct);
        }
        Tally::from_counts(n, c, t, o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub overall: Tally,
    /// Keyed by the ground truth's operator count.
    pub by_op_count: BTreeMap<usize, Tally>,
}

pub fn report_from_verdicts(verdicts: &[Verdict]) -> Report {
    let mut ops: Vec<usize> = verdicts.iter().map(|v| v.op_count).collect();
    ops.sort_unstable();
    ops.dedup();
    let by_op_count =
        ops.into_iter().map(|k| (k, Tally::from_verdicts(verdicts.iter().filter(|v| v.op_count == k)))).collect();
    Report { overall: Tally::from_verdicts(verdicts.iter()), by_op_count }
}

pub fn verdict(model: &Model, problem: &MappedProblem, k: usize, max_len: usize) -> Result<Verdict, PipelineError> {
    let truth = problem.ground_truth_value()?;
    let source = model.vocab.encode(&problem.tokens)?;
    let beams = beam_search(model, &source, k, max_len)?;
    let is_correct = |i: usize| interpret(model, &beams[i], &problem.numbers).is_some_and(|(_, v)| results_equal(&v, &truth));
    let top1 = beams.first().map(|h| model.vocab.decode(h.body()).join(" "));
    let top1_correct = !beams.is_empty() && is_correct(0);
    let oracle_correct = (0..beams.len()).any(is_correct);
    let (predicted, correct) = match solve_from_beams(model, &source, &problem.numbers, &beams)?.choice {
        Some(c) => (Some(c.expr.to_infix()), results_equal(&c.value, &truth)),
        None => (None, false),
    };
    Ok(Verdict {
        problem_id: problem.id.clone(),
        op_count: problem.ground_truth.op_count(),
        ground_truth: problem.ground_truth.to_infix(),
        predicted,
        correct,
        top1,
        top1_correct,
        oracle_correct,
        candidates: beams.len(),
    })
}

pub fn evaluate_accuracy(
    model: &Model,
    problems: &[MappedProblem],
    k: usize,
    max_len: usize,
) -> Result<(Report, Vec<Verdict>), PipelineError> {
    let verdicts = problems.iter().map(|p| verdict(model, p, k, max_len)).collect::<Result<Vec<_>, _>>()?;
    Ok((report_from_verdicts(&verdicts), verdicts))
}

pub fn write_verdicts<W: Write>(verdicts: &[Verdict], mut out: W) -> io::Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
