//! Per-problem expression bank of labeled candidates for ranker training.
//!
//! Candidates come from the generator's beam (model-based), from disturbing the
//! ground truth (tree-based), or from other problems' ground truths (random
//! sample baseline). Every candidate is labeled by exact comparison of its value
//! with the ground truth's value.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturb::disturb_candidates;
use crate::exprcore::{evaluate, parse_expression, parse_infix, results_equal, ExprTree, MappedProblem};
use crate::seeding::derive_rng;

/// Beam size used when building the bank.
pub const DEFAULT_BEAM_SIZE: usize = 10;
/// Cap on non-ground-truth entries per problem.
pub const DEFAULT_BANK_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_correct(correct: bool) -> Label {
        if correct {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Model,
    Disturbance,
    RandomSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExpression {
    pub expr: ExprTree,
    pub label: Label,
    pub provenance: Provenance,
    /// Generator log-probability, for beam candidates.
    pub score_hint: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Model,
    #[serde(alias = "model-plus-tree")]
    ModelTree,
    RandomSample,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Model => "model",
            StrategyKind::ModelTree => "model-tree",
            StrategyKind::RandomSample => "random-sample",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(StrategyKind::Model),
            "model-tree" | "model-plus-tree" => Ok(StrategyKind::ModelTree),
            "random-sample" | "random" => Ok(StrategyKind::RandomSample),
            _ => Err(format!("unknown bank strategy '{s}' (expected model, model-tree or random-sample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankStrategy {
    pub kind: StrategyKind,
    /// Rebuild the bank with the current generator after every joint epoch.
    pub online: bool,
}

impl Default for BankStrategy {
    fn default() -> Self {
        BankStrategy { kind: StrategyKind::ModelTree, online: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSettings {
    pub strategy: BankStrategy,
    pub beam_size: usize,
    pub bank_size: usize,
    /// Disturbance draws per problem; `None` fills the capacity left after the beam.
    pub disturb_count: Option<usize>,
}

impl Default for BankSettings {
    fn default() -> Self {
        BankSettings {
            strategy: BankStrategy::default(),
            beam_size: DEFAULT_BEAM_SIZE,
            bank_size: DEFAULT_BANK_SIZE,
            disturb_count: None,
        }
    }
}

impl BankSettings {
    pub fn effective_disturb_count(&self) -> usize {
        self.disturb_count.unwrap_or(self.bank_size.saturating_sub(self.beam_size))
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("invalid bank settings: {0}")]
    InvalidSettings(String),
    #[error("the expression bank has no entries")]
    EmptyBank,
    #[error("bank dump line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One generated sequence, as tokens, with its generator log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCandidate {
    pub tokens: Vec<String>,
    pub log_prob: f64,
}

/// Anything that can propose top-K expressions for a problem.
pub trait CandidateGenerator {
    fn generate(&self, problem: &MappedProblem, k: usize) -> Result<Vec<GeneratedCandidate>, BankError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMetrics {
    /// Generated sequences that failed to parse.
    pub unparseable: usize,
    /// Candidates referencing numbers absent from the problem's table.
    pub invalid: usize,
    pub from_model: usize,
    pub from_disturbance: usize,
    pub from_random_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub problem_id: String,
    pub positives: Vec<LabeledExpression>,
    pub negatives: Vec<LabeledExpression>,
}

impl BankEntry {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledExpression> {
        self.positives.iter().chain(self.negatives.iter())
    }
}

/// Entries are stored in the order of the problems the bank was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBank {
    capacity: usize,
    entries: Vec<BankEntry>,
    metrics: BankMetrics,
    positive_index: Vec<(u32, u32)>,
    negative_index: Vec<(u32, u32)>,
}

/// A sampled ranking pair: problem index plus the candidate.
#[derive(Debug, Clone, Copy)]
pub struct RankingSample<'a> {
    pub problem: usize,
    pub expr: &'a LabeledExpression,
}

/// One line of the JSON-lines bank dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub problem_id: String,
    pub expression: String,
    pub label: Label,
    pub provenance: Provenance,
    pub score_hint: Option<f64>,
}

impl ExpressionBank {
    fn from_entries(capacity: usize, entries: Vec<BankEntry>, metrics: BankMetrics) -> ExpressionBank {
        let mut positive_index = Vec::new();
        let mut negative_index = Vec::new();
        for (p, entry) in entries.iter().enumerate() {
            positive_index.extend((0..entry.positives.len()).map(|i| (p as u32, i as u32)));
            negative_index.extend((0..entry.negatives.len()).map(|i| (p as u32, i as u32)));
        }
        ExpressionBank { capacity, entries, metrics, positive_index, negative_index }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn metrics(&self) -> &BankMetrics {
        &self.metrics
    }

    pub fn positive_count(&self) -> usize {
        self.positive_index.len()
    }

    pub fn negative_count(&self) -> usize {
        self.negative_index.len()
    }

    /// Draw `ceil(pos_ratio * batch_size)` positives and the rest negatives.
    ///
    /// Sampling is uniform with replacement over all (problem, expression) pairs of
    /// a class. If one class is empty the whole batch comes from the other.
    pub fn sample_ranking_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        pos_ratio: f64,
        rng: &mut R,
    ) -> Result<Vec<RankingSample<'_>>, BankError> {
        if batch_size == 0 {
            return Err(BankError::InvalidSettings("batch size must be at least 1".into()));
        }
        if !(pos_ratio > 0.0 && pos_ratio < 1.0) {
            return Err(BankError::InvalidSettings(format!("positive ratio {pos_ratio} outside (0, 1)")));
        }
        if self.positive_index.is_empty() && self.negative_index.is_empty() {
            return Err(BankError::EmptyBank);
        }
        let mut positives = (pos_ratio * batch_size as f64).ceil() as usize;
        if self.negative_index.is_empty() {
            positives = batch_size;
        } else if self.positive_index.is_empty() {
            positives = 0;
        }
        let mut batch = Vec::with_capacity(batch_size);
        for slot in 0..batch_size {
            let (index, positive) = if slot < positives {
                (&self.positive_index, true)
            } else {
                (&self.negative_index, false)
            };
            let (p, i) = index[rng.gen_range(0..index.len())];
            let entry = &self.entries[p as usize];
            let expr = if positive { &entry.positives[i as usize] } else { &entry.negatives[i as usize] };
            batch.push(RankingSample { problem: p as usize, expr });
        }
        Ok(batch)
    }

    pub fn records(&self) -> impl Iterator<Item = BankRecord> + '_ {
        self.entries.iter().flat_map(|entry| {
            entry.iter().map(move |e| BankRecord {
                problem_id: entry.problem_id.clone(),
                expression: e.expr.to_infix(),
                label: e.label,
                provenance: e.provenance,
                score_hint: e.score_hint,
            })
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), BankError> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record).map_err(io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Rebuild a bank from dump records, aligned with `problems`.
    pub fn from_records(problems: &[MappedProblem], records: &[BankRecord], capacity: usize) -> Result<ExpressionBank, BankError> {
        let mut entries: Vec<BankEntry> = problems
            .iter()
            .map(|p| BankEntry { problem_id: p.id.clone(), positives: Vec::new(), negatives: Vec::new() })
            .collect();
        let position: std::collections::HashMap<&str, usize> =
            problems.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
        let mut metrics = BankMetrics::default();
        for (line, record) in records.iter().enumerate() {
            let format_err = |message: String| BankError::Format { line: line + 1, message };
            let &p = position
                .get(record.problem_id.as_str())
                .ok_or_else(|| format_err(format!("unknown problem id '{}'", record.problem_id)))?;
            let expr = parse_expression(&record.expression).map_err(|e| format_err(e.to_string()))?;
            match record.provenance {
                Provenance::Model => metrics.from_model += 1,
                Provenance::Disturbance => metrics.from_disturbance += 1,
                Provenance::RandomSample => metrics.from_random_sample += 1,
                Provenance::GroundTruth => {}
            }
            let item = LabeledExpression { expr, label: record.label, provenance: record.provenance, score_hint: record.score_hint };
            match record.label {
                Label::Positive => entries[p].positives.push(item),
                Label::Negative => entries[p].negatives.push(item),
            }
        }
        Ok(ExpressionBank::from_entries(capacity, entries, metrics))
    }

    pub fn read_jsonl<R: BufRead>(problems: &[MappedProblem], input: R, capacity: usize) -> Result<ExpressionBank, BankError> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: BankRecord =
                serde_json::from_str(&line).map_err(|e| BankError::Format { line: i + 1, message: e.to_string() })?;
            records.push(record);
        }
        ExpressionBank::from_records(problems, &records, capacity)
    }
}

/// Accumulates one problem's entry with dedup, labeling and the capacity cap.
struct EntryBuilder<'a> {
    problem: &'a MappedProblem,
    truth: crate::exprcore::ExprValue,
    seen: HashSet<String>,
    entry: BankEntry,
    kept: usize,
    capacity: usize,
}

impl<'a> EntryBuilder<'a> {
    fn new(problem: &'a MappedProblem, capacity: usize) -> Option<EntryBuilder<'a>> {
        let truth = problem.ground_truth_value().ok()?;
        let ground_truth = LabeledExpression {
            expr: problem.ground_truth.clone(),
            label: Label::Positive,
            provenance: Provenance::GroundTruth,
            score_hint: None,
        };
        Some(EntryBuilder {
            problem,
            truth,
            seen: HashSet::from([problem.ground_truth.to_infix()]),
            entry: BankEntry { problem_id: problem.id.clone(), positives: vec![ground_truth], negatives: Vec::new() },
            kept: 0,
            capacity,
        })
    }

    fn full(&self) -> bool {
        self.kept >= self.capacity
    }

    /// Returns false when the candidate references numbers the problem lacks.
    fn offer(&mut self, expr: ExprTree, provenance: Provenance, score_hint: Option<f64>) -> bool {
        if self.full() {
            return true;
        }
        let key = expr.to_infix();
        if self.seen.contains(&key) {
            return true;
        }
        let Ok(value) = evaluate(&expr, &self.problem.numbers) else {
            return false;
        };
        self.seen.insert(key);
        self.kept += 1;
        let label = Label::from_correct(results_equal(&value, &self.truth));
        let item = LabeledExpression { expr, label, provenance, score_hint };
        match label {
            Label::Positive => self.entry.positives.push(item),
            Label::Negative => self.entry.negatives.push(item),
        }
        true
    }
}

/// Build the bank for `problems`.
///
/// Per problem: the ground truth is always a positive; beam candidates come first
/// in beam order, then disturbance candidates in draw order, until `bank_size`
/// non-ground-truth entries are kept. `round` selects a fresh random stream per
/// rebuild (the joint-training epoch).
pub fn build_bank(
    problems: &[MappedProblem],
    generator: &dyn CandidateGenerator,
    settings: &BankSettings,
    seed: u64,
    round: u64,
) -> Result<ExpressionBank, BankError> {
    if settings.beam_size == 0 || settings.bank_size == 0 {
        return Err(BankError::InvalidSettings("beam size and bank size must be at least 1".into()));
    }
    let mut metrics = BankMetrics::default();
    let mut entries = Vec::with_capacity(problems.len());
    for (index, problem) in problems.iter().enumerate() {
        let mut rng = derive_rng(seed, "bank", &format!("{round}/{}", problem.id));
        let Some(mut builder) = EntryBuilder::new(problem, settings.bank_size) else {
            entries.push(BankEntry { problem_id: problem.id.clone(), positives: Vec::new(), negatives: Vec::new() });
            continue;
        };
        match settings.strategy.kind {
            StrategyKind::Model | StrategyKind::ModelTree => {
                for candidate in generator.generate(problem, settings.beam_size)? {
                    match parse_infix(&candidate.tokens) {
                        Ok(expr) => {
                            let before = builder.kept;
                            if !builder.offer(expr, Provenance::Model, Some(candidate.log_prob)) {
                                metrics.invalid += 1;
                            }
                            metrics.from_model += builder.kept - before;
                        }
                        Err(_) => metrics.unparseable += 1,
                    }
                }
                if settings.strategy.kind == StrategyKind::ModelTree {
                    for candidate in disturb_candidates(problem, settings.effective_disturb_count(), &mut rng) {
                        let before = builder.kept;
                        builder.offer(candidate.expr, Provenance::Disturbance, None);
                        metrics.from_disturbance += builder.kept - before;
                    }
                }
            }
            StrategyKind::RandomSample => {
                let others: Vec<usize> = (0..problems.len()).filter(|&j| j != index).collect();
                for _ in 0..settings.bank_size {
                    let Some(&j) = others.choose(&mut rng) else { break };
                    let before = builder.kept;
                    if !builder.offer(problems[j].ground_truth.clone(), Provenance::RandomSample, None) {
                        metrics.invalid += 1;
                    }
                    metrics.from_random_sample += builder.kept - before;
                }
            }
        }
        entries.push(builder.entry);
    }
    Ok(ExpressionBank::from_entries(settings.bank_size, entries, metrics))
}

/// Per-epoch hook: a fresh bank when the strategy is online, otherwise `current` unchanged.
pub fn rebuild_each_epoch(
    current: ExpressionBank,
    problems: &[MappedProblem],
    generator: &dyn CandidateGenerator,
    settings: &BankSettings,
    seed: u64,
    epoch: u64,
) -> Result<ExpressionBank, BankError> {
    if settings.strategy.online {
        build_bank(problems, generator, settings, seed, epoch)
    } else {
        Ok(current)
    }
}
