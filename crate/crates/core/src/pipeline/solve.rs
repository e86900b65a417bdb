//! Generate-then-rank inference for a single problem.

use serde::{Deserialize, Serialize};

use crate::exprcore::{evaluate, parse_infix, ExprTree, ExprValue, NumberTable};
use crate::model::Model;

use super::beam::{beam_search, BeamHypothesis};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated tokens joined by spaces, without `[eos]`.
    pub expression: String,
    pub log_prob: f64,
    pub finished: bool,
    /// Ranking score `Pr(1 | P, S)`; absent when the candidate was dropped.
    pub score: Option<f64>,
    /// Exact value as text, when the candidate is a valid expression.
    pub value: Option<String>,
}

/// The ranked choice among the valid candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub expr: ExprTree,
    pub value: ExprValue,
    /// Index into [`Solution::candidates`].
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Absent when no beam hypothesis is a valid expression.
    pub choice: Option<Choice>,
    /// Every beam hypothesis in beam order.
    pub candidates: Vec<Candidate>,
}

/// A beam hypothesis that parses and only references available numbers.
pub(crate) fn interpret(model: &Model, h: &BeamHypothesis, numbers: &NumberTable) -> Option<(ExprTree, ExprValue)> {
    let tokens = model.vocab.decode(h.body());
    let tree = parse_infix(&tokens).ok()?;
    let value = evaluate(&tree, numbers).ok()?;
    Some((tree, value))
}

/// Beam candidates scored by the ranker; the best valid one is chosen.
///
/// Ties on the ranking score go to the higher generator log-probability, then
/// to the earlier beam position.
pub fn solve(model: &Model, tokens: &[String], numbers: &NumberTable, k: usize, max_len: usize) -> Result<Solution, PipelineError> {
    let source = model.vocab.encode(tokens)?;
    let beams = beam_search(model, &source, k, max_len)?;
    solve_from_beams(model, &source, numbers, &beams)
}

pub(crate) fn solve_from_beams(
    model: &Model,
    source: &[usize],
    numbers: &NumberTable,
    beams: &[BeamHypothesis],
) -> Result<Solution, PipelineError> {
    let interpreted: Vec<Option<(ExprTree, ExprValue)>> = beams.iter().map(|h| interpret(model, h, numbers)).collect();
    let valid: Vec<usize> = (0..beams.len()).filter(|&i| interpreted[i].is_some()).collect();
    let sequences: Vec<Vec<usize>> = valid.iter().map(|&i| model.vocab.wrap(beams[i].body())).collect();
    let scores = model.rank_scores(source, &sequences)?;

    let mut candidates: Vec<Candidate> = beams
        .iter()
        .zip(&interpreted)
        .map(|(h, parsed)| Candidate {
            expression: model.vocab.decode(h.body()).join(" "),
            log_prob: h.log_prob,
            finished: h.finished,
            score: None,
            value: parsed.as_ref().map(|(_, v)| v.to_string()),
        })
        .collect();
    let mut best: Option<usize> = None;
    for (&i, &score) in valid.iter().zip(&scores) {
        candidates[i].score = Some(score);
        let better = match best {
            None => true,
            Some(b) => {
                let (bs, bl) = (candidates[b].score.expect("scored"), candidates[b].log_prob);
                score > bs || (score == bs && beams[i].log_prob > bl)
            }
        };
        if better {
            best = Some(i);
        }
    }
    let choice = best.map(|index| {
        let (expr, value) = interpreted[index].clone().expect("chosen candidate is valid");
        Choice { expr, value, index }
    });
    Ok(Solution { choice, candidates })
}
