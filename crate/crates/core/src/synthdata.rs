//! Synthetic word problems and the JSON-lines dataset format.
//!
//! Records carry raw text with inline numerals and an equation over the same
//! numerals. Loading applies number mapping to both, matching equation numerals
//! to text numerals by value (first occurrence wins).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprcore::{
    decimal_string, evaluate, lex_expression, map_numbers, num_token, num_token_index, parse_decimal, parse_infix,
    ExprError, ExprValue, MappedProblem,
};
use crate::seeding::derive_rng;

/// Smallest and largest numeral drawn for synthetic problems.
pub const NUMERAL_RANGE: (i64, i64) = (2, 100);
pub const MAX_OPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub text: String,
    pub equation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: bad equation: {source}")]
    Parse { line: usize, source: ExprError },
    #[error("invalid operator-count distribution: {0}")]
    Distribution(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub problems: Vec<MappedProblem>,
    pub warnings: Vec<LoadWarning>,
}

/// A problem template. Slots `{a}`..`{f}` feed the expression; `{x}` is a
/// distractor numeral; `{n}`/`{m}` are names and `{i}` an item word.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub text: &'static str,
    pub expression: &'static str,
}

const NAMES: [&str; 8] = ["Tom", "Anna", "Ben", "Lucy", "Sam", "Mia", "Jack", "Emma"];
const ITEMS: [&str; 8] = ["apples", "pencils", "books", "cards", "stamps", "marbles", "cookies", "flowers"];
const EXPRESSION_SLOTS: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];
const DISTRACTOR_SLOT: char = 'x';

const ONE_OP: [Template; 8] = [
    Template { text: "{n} has {a} {i} . {n} buys {b} more {i} . How many {i} does {n} have now ?", expression: "{a} + {b}" },
    Template { text: "{n} had {a} {i} and gave {b} {i} to {m} . How many {i} are left ?", expression: "{a} - {b}" },
    Template { text: "There are {a} boxes and each box holds {b} {i} . How many {i} are there in total ?", expression: "{a} * {b}" },
    Template { text: "{n} shares {a} {i} equally among {b} friends . How many {i} does each friend get ?", expression: "{a} / {b}" },
    Template {
        text: "{n} is {x} years old . {n} read {a} pages on Monday and {b} pages on Tuesday . How many pages did {n} read ?",
        expression: "{a} + {b}",
    },
    Template {
        text: "A shelf has {a} {i} . {b} {i} were sold . {n} counted {x} boxes . How many {i} remain on the shelf ?",
        expression: "{a} - {b}",
    },
    Template { text: "Each bag has {b} {i} . {n} has {a} bags . How many {i} does {n} have ?", expression: "{a} * {b}" },
    Template { text: "{n} runs {a} meters in {b} days . How many meters does {n} run each day ?", expression: "{a} / {b}" },
];

const TWO_OPS: [Template; 8] = [
    Template {
        text: "{n} has {a} {i} . {n} buys {b} more and then gives {c} to {m} . How many {i} does {n} have now ?",
        expression: "{a} + {b} - {c}",
    },
    Template {
        text: "A store sells {a} {i} each day for {b} days . {c} {i} were returned . How many {i} were sold in the end ?",
        expression: "{a} * {b} - {c}",
    },
    Template {
        text: "{n} has {a} {i} and {m} has {b} {i} . They share them equally among {c} friends . How many {i} does each friend get ?",
        expression: "( {a} + {b} ) / {c}",
    },
    Template {
        text: "A project is completed in {a} days by {b} workers . If it takes {c} days to complete , how many workers will it take ?",
        expression: "{a} * {b} / {c}",
    },
    Template {
        text: "{n} buys {a} boxes of {i} . Each box costs {b} dollars . {n} pays with {c} dollars . How much change does {n} get ?",
        expression: "{c} - {a} * {b}",
    },
    Template {
        text: "{n} is {x} years old . {n} had {a} {i} and lost {b} of them . Then {n} put the rest into {c} bags equally . How many {i} are in each bag ?",
        expression: "( {a} - {b} ) / {c}",
    },
    Template {
        text: "There are {a} rows of {i} with {b} {i} in each row . {n} adds {c} more {i} . How many {i} are there now ?",
        expression: "{a} * {b} + {c}",
    },
    Template {
        text: "{n} reads {a} pages each day . The book has {b} pages and {n} has read for {c} days . How many pages are left ?",
        expression: "{b} - {a} * {c}",
    },
];

const THREE_OPS: [Template; 8] = [
    Template {
        text: "{n} has {a} {i} . {m} has {b} more {i} than {n} . They put all the {i} into {c} bags equally . How many {i} are in each bag ?",
        expression: "( {a} + {a} + {b} ) / {c}",
    },
    Template {
        text: "A farm has {a} rows with {b} {i} in each row . {c} {i} were sold and {d} {i} were bought . How many {i} does the farm have now ?",
        expression: "{a} * {b} - {c} + {d}",
    },
    Template {
        text: "{n} earns {a} dollars each week for {b} weeks . {n} spends {c} dollars and saves the rest in {d} equal parts . How much is each part ?",
        expression: "( {a} * {b} - {c} ) / {d}",
    },
    Template {
        text: "A truck goes {a} km each hour for {b} hours and then {c} km each hour for {d} hours . How many km does it go ?",
        expression: "{a} * {b} + {c} * {d}",
    },
    Template {
        text: "{n} is {x} years old . {n} had {a} {i} . {n} gave {b} {i} to {m} and {c} {i} to a friend , then bought {d} more . How many {i} does {n} have ?",
        expression: "{a} - {b} - {c} + {d}",
    },
    Template {
        text: "There are {a} boxes with {b} {i} each and {c} bags with {d} {i} each . How many more {i} are in the boxes than in the bags ?",
        expression: "{a} * {b} - {c} * {d}",
    },
    Template {
        text: "{n} bought {a} {i} at {b} dollars each and paid {c} dollars for a bag . {n} split the cost with {d} friends equally . How much does each friend pay ?",
        expression: "( {a} * {b} + {c} ) / {d}",
    },
    Template {
        text: "A tank holds {a} liters . {b} liters leak out each hour for {c} hours and {d} liters are added . How many liters are in the tank ?",
        expression: "{a} - {b} * {c} + {d}",
    },
];

const FOUR_OPS: [Template; 8] = [
    Template {
        text: "{n} has {a} {i} and {m} has {b} {i} . They buy {c} packs with {d} {i} in each pack and share all the {i} among {e} friends . How many {i} does each friend get ?",
        expression: "( {a} + {b} + {c} * {d} ) / {e}",
    },
    Template {
        text: "A shop sold {a} {i} on Monday and {b} {i} on Tuesday at {c} dollars each . It paid {d} dollars for rent and {e} dollars for light . How much money is left ?",
        expression: "( {a} + {b} ) * {c} - {d} - {e}",
    },
    Template {
        text: "{n} runs {a} meters each day for {b} days and {c} meters each day for {d} days . {n} counted {x} boxes . How many meters is that each day over {e} days ?",
        expression: "( {a} * {b} + {c} * {d} ) / {e}",
    },
    Template {
        text: "There are {a} rows with {b} seats in each row . {c} seats are broken and {d} students sit in each of {e} rows . How many seats are empty ?",
        expression: "{a} * {b} - {c} - {d} * {e}",
    },
    Template {
        text: "{n} had {a} dollars . {n} bought {b} {i} at {c} dollars each and {d} {i} at {e} dollars each . How much money is left ?",
        expression: "{a} - {b} * {c} - {d} * {e}",
    },
    Template {
        text: "A class has {a} boys and {b} girls . Each student gets {c} {i} and the teacher keeps {d} {i} . The {i} come in boxes of {e} . How many boxes are needed ?",
        expression: "( ( {a} + {b} ) * {c} + {d} ) / {e}",
    },
    Template {
        text: "{n} is {x} years old . {n} saves {a} dollars each week for {b} weeks and {m} saves {c} dollars each week for {d} weeks . They add {e} dollars from a gift . How much do they have together ?",
        expression: "{a} * {b} + {c} * {d} + {e}",
    },
    Template {
        text: "A baker makes {a} boxes with {b} cookies in each box . {c} cookies burn and {d} cookies are eaten . The rest are put into bags of {e} . How many bags are there ?",
        expression: "( {a} * {b} - {c} - {d} ) / {e}",
    },
];

const FIVE_OPS: [Template; 8] = [
    Template {
        text: "{n} has {a} {i} and {m} has {b} {i} . {n} buys {c} packs of {d} {i} and {m} gives away {e} {i} . They share all the {i} among {f} friends . How many {i} does each friend get ?",
        expression: "( {a} + {b} + {c} * {d} - {e} ) / {f}",
    },
    Template {
        text: "A shop sold {a} {i} at {b} dollars each and {c} {i} at {d} dollars each . It paid {e} dollars for rent and {f} dollars for light . How much money did it make ?",
        expression: "{a} * {b} + {c} * {d} - {e} - {f}",
    },
    Template {
        text: "A truck carries {a} boxes each trip for {b} trips and {c} boxes each trip for {d} trips . {e} boxes break . The rest go into {f} stores equally . How many boxes does each store get ?",
        expression: "( {a} * {b} + {c} * {d} - {e} ) / {f}",
    },
    Template {
        text: "{n} had {a} dollars and earns {b} dollars each day for {c} days . {n} bought {d} {i} at {e} dollars each and gave {f} dollars to {m} . How much money is left ?",
        expression: "{a} + {b} * {c} - {d} * {e} - {f}",
    },
    Template {
        text: "There are {a} rooms with {b} desks in each room and {c} rooms with {d} desks in each room . {e} desks are moved to each of {f} rooms . How many desks are left ?",
        expression: "{a} * {b} + {c} * {d} - {e} * {f}",
    },
    Template {
        text: "{n} is {x} years old . A farm had {a} {i} . It sold {b} {i} each day for {c} days and bought {d} {i} each day for {e} days . It gave {f} {i} away . How many {i} does the farm have ?",
        expression: "{a} - {b} * {c} + {d} * {e} - {f}",
    },
    Template {
        text: "{n} has {a} boxes with {b} {i} each . {n} gives {c} boxes with {d} {i} each to {m} and finds {e} more {i} . {n} puts the {i} into bags of {f} . How many bags does {n} fill ?",
        expression: "( {a} * {b} - {c} * {d} + {e} ) / {f}",
    },
    Template {
        text: "A school has {a} classes in the morning and {b} classes in the afternoon with {c} students in each class . {d} students are away and {e} teachers join them . They ride in buses of {f} . How many buses are needed ?",
        expression: "( ( {a} + {b} ) * {c} - {d} + {e} ) / {f}",
    },
];

/// Templates with exactly `ops` operators (1 to 5).
pub fn templates(ops: usize) -> &'static [Template] {
    match ops {
        1 => &ONE_OP,
        2 => &TWO_OPS,
        3 => &THREE_OPS,
        4 => &FOUR_OPS,
        5 => &FIVE_OPS,
        _ => &[],
    }
}

/// Slot letters used inside `{...}` placeholders of a pattern, in order of appearance.
pub fn slots(pattern: &str) -> Vec<char> {
    let bytes: Vec<char> = pattern.chars().collect();
    bytes
        .windows(3)
        .filter(|w| w[0] == '{' && w[2] == '}')
        .map(|w| w[1])
        .collect()
}

/// Probability of each operator count 1..=5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCountDistribution(pub [f64; MAX_OPS]);

impl OpCountDistribution {
    pub fn new(weights: [f64; MAX_OPS]) -> Result<Self, DataError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DataError::Distribution("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Distribution(format!("weights sum to {total}, expected 1")));
        }
        Ok(OpCountDistribution(weights))
    }

    /// Uniform over operator counts `1..=max_ops`.
    pub fn uniform_up_to(max_ops: usize) -> Self {
        let max_ops = max_ops.clamp(1, MAX_OPS);
        let mut w = [0.0; MAX_OPS];
        for slot in w.iter_mut().take(max_ops) {
            *slot = 1.0 / max_ops as f64;
        }
        OpCountDistribution(w)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.0.iter().enumerate() {
            acc += w;
            if u < acc {
                return i + 1;
            }
        }
        // Rounding left a sliver above the last cumulative weight.
        self.0.iter().rposition(|w| *w > 0.0).map_or(1, |i| i + 1)
    }
}

impl Default for OpCountDistribution {
    fn default() -> Self {
        OpCountDistribution::uniform_up_to(MAX_OPS)
    }
}

fn fill(pattern: &str, numbers: &[(char, i64)], names: (&str, &str), item: &str) -> String {
    let mut text = pattern.replace("{n}", names.0).replace("{m}", names.1).replace("{i}", item);
    for (slot, value) in numbers {
        text = text.replace(&format!("{{{slot}}}"), &value.to_string());
    }
    text
}

fn instantiate<R: Rng + ?Sized>(template: &Template, rng: &mut R) -> (String, String, ExprValue) {
    let mut used: Vec<char> =
        slots(template.text).into_iter().filter(|c| EXPRESSION_SLOTS.contains(c) || *c == DISTRACTOR_SLOT).collect();
    used.sort_unstable();
    used.dedup();
    loop {
        let mut values: Vec<i64> = Vec::with_capacity(used.len());
        while values.len() < used.len() {
            let v = rng.gen_range(NUMERAL_RANGE.0..=NUMERAL_RANGE.1);
            // Distinct values keep the value-based numeral matching unambiguous.
            if !values.contains(&v) {
                values.push(v);
            }
        }
        let numbers: Vec<(char, i64)> = used.iter().copied().zip(values).collect();
        let picked: Vec<&&str> = NAMES.choose_multiple(rng, 2).collect();
        let names = (*picked[0], *picked[1]);
        let item = ITEMS.choose(rng).expect("non-empty item list");
        let record = ProblemRecord {
            id: String::new(),
            text: fill(template.text, &numbers, names, item),
            equation: fill(template.expression, &numbers, names, item),
            answer: None,
        };
        let (problem, _) = map_record(&record, 0).expect("templates hold valid expressions");
        let value = problem.ground_truth_value().expect("equation numerals appear in the text");
        if value != ExprValue::Undefined {
            return (record.text, record.equation, value);
        }
    }
}

/// `n` records drawn from the templates; deterministic under `seed`.
pub fn generate_dataset(n: usize, distribution: &OpCountDistribution, seed: u64) -> Vec<ProblemRecord> {
    let mut rng = derive_rng(seed, "synth", "");
    (0..n)
        .map(|i| {
            let ops = distribution.sample(&mut rng);
            let template = templates(ops).choose(&mut rng).expect("eight templates per operator count");
            let (text, equation, value) = instantiate(template, &mut rng);
            let answer = value.as_rational().and_then(decimal_string);
            ProblemRecord { id: format!("synth-{seed}-{i}"), text, equation, answer }
        })
        .collect()
}

fn parse_signed_decimal(text: &str) -> Option<BigRational> {
    let text = text.trim();
    match text.strip_prefix('-') {
        Some(rest) => parse_decimal(rest).map(|v| -v),
        None => parse_decimal(text),
    }
}

/// Number-map one record. Returns a warning when the stated answer disagrees.
pub fn map_record(record: &ProblemRecord, line: usize) -> Result<(MappedProblem, Option<LoadWarning>), DataError> {
    let (tokens, numbers) = map_numbers(&record.text);
    let equation_tokens: Vec<String> = lex_expression(&record.equation)
        .into_iter()
        .map(|t| match parse_decimal(&t) {
            Some(value) if num_token_index(&t).is_none() => match numbers.position_of(&value) {
                Some(index) => num_token(index),
                None => t,
            },
            _ => t,
        })
        .collect();
    let ground_truth = parse_infix(&equation_tokens).map_err(|source| DataError::Parse { line, source })?;
    let value = evaluate(&ground_truth, &numbers).map_err(|source| DataError::Parse { line, source })?;
    let warning = record.answer.as_ref().and_then(|answer| {
        let stated = parse_signed_decimal(answer);
        let consistent = match (&stated, &value) {
            (Some(s), ExprValue::Defined(v)) => s == v,
            _ => false,
        };
        (!consistent).then(|| LoadWarning {
            line,
            message: format!("record '{}': answer {answer} disagrees with equation value {value}", record.id),
        })
    });
    Ok((MappedProblem { id: record.id.clone(), tokens, numbers, ground_truth }, warning))
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<(usize, ProblemRecord)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProblemRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Format { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub fn load_from_reader<R: BufRead>(input: R) -> Result<LoadedDataset, DataError> {
    let mut dataset = LoadedDataset::default();
    for (line, record) in read_records(input)? {
        let (problem, warning) = map_record(&record, line)?;
        dataset.problems.push(problem);
        dataset.warnings.extend(warning);
    }
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset, DataError> {
    load_from_reader(BufReader::new(File::open(path)?))
}

pub fn write_records<W: Write>(records: &[ProblemRecord], mut out: W) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fold index for each of `count` records: seeded shuffle, then round-robin.
pub fn split_dataset(count: usize, folds: usize, seed: u64) -> Vec<usize> {
    assert!(folds >= 2, "at least two folds are required");
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut derive_rng(seed, "folds", ""));
    let mut assignment = vec![0; count];
    for (rank, &record) in order.iter().enumerate() {
        assignment[record] = rank % folds;
    }
    assignment
}

/// Word types (non-numeral tokens) across every template, after slot filling.
pub fn template_vocabulary() -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for ops in 1..=MAX_OPS {
        for template in templates(ops) {
            for token in template.text.split_whitespace() {
                match token {
                    "{n}" | "{m}" => words.extend(NAMES.iter().map(|s| s.to_string())),
                    "{i}" => words.extend(ITEMS.iter().map(|s| s.to_string())),
                    t if t.starts_with('{') => {}
                    t => {
                        words.insert(t.to_string());
                    }
                }
            }
        }
    }
    words
}
