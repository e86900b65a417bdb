//! Solution expressions: number mapping, infix parsing and printing, exact evaluation.
//!
//! Expressions are binary trees over `+ - * /` whose leaves are either problem
//! numbers (`NUM0`, `NUM1`, ...) or literal constants. Values are exact rationals,
//! so two expressions agree only when they denote the same number.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use thiserror::Error;

/// Prefix of the placeholder tokens that replace numerals in problem text.
pub const NUM_PREFIX: &str = "NUM";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at token {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("number token NUM{0} has no entry in the number table")]
    MissingNumber(usize),
}

impl ExprError {
    fn syntax(position: usize, message: impl Into<String>) -> Self {
        ExprError::Syntax { position, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "/",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "-" | "−" => Some(Op::Sub),
            "*" | "×" => Some(Op::Mul),
            "/" | "÷" => Some(Op::Div),
            _ => None,
        }
    }

    pub fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul | Op::Div => 2,
        }
    }

    /// `a op b == b op a` for every pair of operands.
    pub fn is_commutative(self) -> bool {
        matches!(self, Op::Add | Op::Mul)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A literal constant with a terminating decimal expansion.
///
/// Only constructible from decimal literals, which keeps printing exact.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constant(BigRational);

impl Constant {
    pub fn parse(literal: &str) -> Option<Constant> {
        parse_decimal(literal).map(Constant)
    }

    pub fn from_integer(n: i64) -> Constant {
        Constant(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn value(&self) -> &BigRational {
        &self.0
    }

    pub fn to_decimal_string(&self) -> String {
        decimal_string(&self.0).expect("constants always have a terminating expansion")
    }
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Num(usize),
    Const(Constant),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Num(i) => write!(f, "{NUM_PREFIX}{i}"),
            Operand::Const(c) => c.fmt(f),
        }
    }
}

/// Binary expression tree. Every operator node has exactly two children.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExprTree {
    Leaf(Operand),
    Node { op: Op, left: Box<ExprTree>, right: Box<ExprTree> },
}

impl ExprTree {
    pub fn num(i: usize) -> ExprTree {
        ExprTree::Leaf(Operand::Num(i))
    }

    pub fn constant(c: Constant) -> ExprTree {
        ExprTree::Leaf(Operand::Const(c))
    }

    pub fn node(op: Op, left: ExprTree, right: ExprTree) -> ExprTree {
        ExprTree::Node { op, left: Box::new(left), right: Box::new(right) }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ExprTree::Leaf(_))
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 1,
            ExprTree::Node { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    pub fn op_count(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 0,
            ExprTree::Node { left, right, .. } => 1 + left.op_count() + right.op_count(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.leaf_count() + self.op_count()
    }

    pub fn depth(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 0,
            ExprTree::Node { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Indices of every `NUM` leaf, in left-to-right order (with repeats).
    pub fn num_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |operand| {
            if let Operand::Num(i) = operand {
                out.push(*i);
            }
        });
        out
    }

    fn visit_leaves(&self, f: &mut impl FnMut(&Operand)) {
        match self {
            ExprTree::Leaf(operand) => f(operand),
            ExprTree::Node { left, right, .. } => {
                left.visit_leaves(f);
                right.visit_leaves(f);
            }
        }
    }

    pub fn to_tokens(&self) -> Vec<String> {
        serialize_infix(self)
    }

    pub fn to_infix(&self) -> String {
        serialize_infix(self).join(" ")
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix())
    }
}

/// Exact values of `NUM0`, `NUM1`, ... for one problem.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumberTable(Vec<BigRational>);

impl NumberTable {
    pub fn new(values: Vec<BigRational>) -> NumberTable {
        NumberTable(values)
    }

    pub fn from_integers(values: &[i64]) -> NumberTable {
        NumberTable(values.iter().map(|&v| BigRational::from_integer(BigInt::from(v))).collect())
    }

    pub fn get(&self, index: usize) -> Option<&BigRational> {
        self.0.get(index)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[BigRational] {
        &self.0
    }

    /// First `NUM` index whose value equals `value`.
    pub fn position_of(&self, value: &BigRational) -> Option<usize> {
        self.0.iter().position(|v| v == value)
    }
}

/// A number-mapped problem with its ground-truth solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedProblem {
    pub id: String,
    pub tokens: Vec<String>,
    pub numbers: NumberTable,
    pub ground_truth: ExprTree,
}

impl MappedProblem {
    pub fn ground_truth_value(&self) -> Result<ExprValue, ExprError> {
        evaluate(&self.ground_truth, &self.numbers)
    }
}

/// Result of evaluating an expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprValue {
    Defined(BigRational),
    /// Some division node had a zero divisor.
    Undefined,
}

impl ExprValue {
    pub fn as_rational(&self) -> Option<&BigRational> {
        match self {
            ExprValue::Defined(v) => Some(v),
            ExprValue::Undefined => None,
        }
    }

    pub fn to_f64(&self) -> Option<f64> {
        self.as_rational().and_then(|v| v.to_f64())
    }
}

impl fmt::Display for ExprValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprValue::Undefined => f.write_str("undefined"),
            ExprValue::Defined(v) => match decimal_string(v) {
                Some(s) => f.write_str(&s),
                None => write!(f, "{}/{} (~{:.6})", v.numer(), v.denom(), v.to_f64().unwrap_or(f64::NAN)),
            },
        }
    }
}

pub fn is_num_token(token: &str) -> bool {
    num_token_index(token).is_some()
}

pub fn num_token_index(token: &str) -> Option<usize> {
    let digits = token.strip_prefix(NUM_PREFIX)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn num_token(index: usize) -> String {
    format!("{NUM_PREFIX}{index}")
}

/// Parse an integer or decimal literal (`25`, `3.5`) into an exact rational.
pub fn parse_decimal(literal: &str) -> Option<BigRational> {
    let (int_part, frac_part) = match literal.split_once('.') {
        Some((i, f)) => (i, f),
        None => (literal, ""),
    };
    if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if literal.contains('.') && (frac_part.is_empty() || !frac_part.bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let digits: BigInt = format!("{int_part}{frac_part}").parse().ok()?;
    let scale = BigInt::from(10u32).pow(frac_part.len() as u32);
    Some(BigRational::new(digits, scale))
}

/// Exact decimal rendering, or `None` when the expansion does not terminate.
pub fn decimal_string(value: &BigRational) -> Option<String> {
    let mut denom = value.denom().clone();
    let two = BigInt::from(2u32);
    let five = BigInt::from(5u32);
    let (mut twos, mut fives) = (0u32, 0u32);
    while (&denom % &two).is_zero() {
        denom /= &two;
        twos += 1;
    }
    while (&denom % &five).is_zero() {
        denom /= &five;
        fives += 1;
    }
    if !denom.is_one() {
        return None;
    }
    let places = twos.max(fives);
    let scaled = value * BigRational::from_integer(BigInt::from(10u32).pow(places));
    let digits = scaled.to_integer();
    let negative = digits.is_negative();
    let mut text = digits.abs().to_string();
    if places > 0 {
        let places = places as usize;
        if text.len() <= places {
            text = format!("{}{}", "0".repeat(places + 1 - text.len()), text);
        }
        text.insert(text.len() - places, '.');
    }
    if negative {
        text.insert(0, '-');
    }
    Some(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Digit,
    Alpha,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_ascii_digit() {
        CharClass::Digit
    } else if c.is_alphanumeric() || c == '_' || c == '#' {
        CharClass::Alpha
    } else {
        CharClass::Punct
    }
}

/// Split raw problem text into word, numeral and punctuation tokens.
///
/// Whitespace separates tokens; punctuation characters become standalone tokens;
/// a numeral is a maximal `digits(.digits)?` run. Letters glued to digits stay in one
/// word (`NUM0`, `3rd`) unless the run starts with a digit.
pub fn tokenize(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        match classify(chars[i]) {
            CharClass::Space => i += 1,
            CharClass::Punct => {
                tokens.push(chars[i].to_string());
                i += 1;
            }
            CharClass::Digit => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                tokens.push(chars[start..i].iter().collect());
            }
            CharClass::Alpha => {
                let start = i;
                while i < chars.len() && matches!(classify(chars[i]), CharClass::Alpha | CharClass::Digit) {
                    i += 1;
                }
                tokens.push(chars[start..i].iter().collect());
            }
        }
    }
    tokens
}

fn is_numeral(token: &str) -> bool {
    token.as_bytes().first().is_some_and(|b| b.is_ascii_digit()) && parse_decimal(token).is_some()
}

/// Replace every numeral with `NUM<i>` in order of occurrence.
///
/// Each occurrence gets its own index, so repeated values map to distinct tokens.
pub fn map_numbers(raw: &str) -> (Vec<String>, NumberTable) {
    let mut values = Vec::new();
    let tokens = tokenize(raw)
        .into_iter()
        .map(|token| {
            if is_numeral(&token) {
                let value = parse_decimal(&token).expect("numeral checked above");
                values.push(value);
                num_token(values.len() - 1)
            } else {
                token
            }
        })
        .collect();
    (tokens, NumberTable(values))
}

/// Split an expression string into tokens; tolerates missing spaces (`(NUM0+NUM1)`).
pub fn lex_expression(text: &str) -> Vec<String> {
    tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Operand,
    Operator,
}

enum Pending {
    Op(Op),
    Open(usize),
}

/// Parse infix expression tokens with the usual precedence and left associativity.
pub fn parse_infix<S: AsRef<str>>(tokens: &[S]) -> Result<ExprTree, ExprError> {
    if tokens.is_empty() {
        return Err(ExprError::syntax(0, "empty expression"));
    }
    let mut output: Vec<ExprTree> = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut expect = Expect::Operand;

    fn reduce(output: &mut Vec<ExprTree>, op: Op, position: usize) -> Result<(), ExprError> {
        let right = output.pop().ok_or_else(|| ExprError::syntax(position, "missing operand"))?;
        let left = output.pop().ok_or_else(|| ExprError::syntax(position, "missing operand"))?;
        output.push(ExprTree::node(op, left, right));
        Ok(())
    }

    for (position, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        match token {
            "(" => {
                if expect != Expect::Operand {
                    return Err(ExprError::syntax(position, "unexpected '('"));
                }
                pending.push(Pending::Open(position));
            }
            ")" => {
                if expect != Expect::Operator {
                    return Err(ExprError::syntax(position, "unexpected ')'"));
                }
                loop {
                    match pending.pop() {
                        Some(Pending::Op(op)) => reduce(&mut output, op, position)?,
                        Some(Pending::Open(_)) => break,
                        None => return Err(ExprError::syntax(position, "unbalanced ')'")),
                    }
                }
                expect = Expect::Operator;
            }
            _ => {
                if let Some(op) = Op::from_symbol(token) {
                    if expect != Expect::Operator {
                        return Err(ExprError::syntax(position, format!("dangling operator '{token}'")));
                    }
                    while let Some(Pending::Op(top)) = pending.last() {
                        if top.precedence() >= op.precedence() {
                            let top = *top;
                            pending.pop();
                            reduce(&mut output, top, position)?;
                        } else {
                            break;
                        }
                    }
                    pending.push(Pending::Op(op));
                    expect = Expect::Operand;
                    continue;
                }
                if expect != Expect::Operand {
                    return Err(ExprError::syntax(position, format!("expected operator, found '{token}'")));
                }
                let leaf = if let Some(i) = num_token_index(token) {
                    ExprTree::num(i)
                } else if let Some(c) = Constant::parse(token) {
                    ExprTree::constant(c)
                } else {
                    return Err(ExprError::syntax(position, format!("unknown token '{token}'")));
                };
                output.push(leaf);
                expect = Expect::Operator;
            }
        }
    }

    if expect != Expect::Operator {
        return Err(ExprError::syntax(tokens.len(), "expression ends with an operator"));
    }
    while let Some(p) = pending.pop() {
        match p {
            Pending::Op(op) => reduce(&mut output, op, tokens.len())?,
            Pending::Open(position) => return Err(ExprError::syntax(position, "unbalanced '('")),
        }
    }
    match output.len() {
        1 => Ok(output.pop().expect("length checked")),
        _ => Err(ExprError::syntax(tokens.len(), "malformed expression")),
    }
}

/// Lex and parse an expression string.
pub fn parse_expression(text: &str) -> Result<ExprTree, ExprError> {
    parse_infix(&lex_expression(text))
}

/// Infix tokens with parentheses only where the tree shape requires them.
pub fn serialize_infix(tree: &ExprTree) -> Vec<String> {
    let mut out = Vec::new();
    write_tokens(tree, &mut out);
    out
}

fn write_tokens(tree: &ExprTree, out: &mut Vec<String>) {
    match tree {
        ExprTree::Leaf(operand) => out.push(operand.to_string()),
        ExprTree::Node { op, left, right } => {
            let left_parens = matches!(**left, ExprTree::Node { op: l, .. } if l.precedence() < op.precedence());
            // Equal precedence on the right needs parentheses: operators associate left.
            let right_parens = matches!(**right, ExprTree::Node { op: r, .. } if r.precedence() <= op.precedence());
            write_wrapped(left, left_parens, out);
            out.push(op.symbol().to_string());
            write_wrapped(right, right_parens, out);
        }
    }
}

fn write_wrapped(tree: &ExprTree, parens: bool, out: &mut Vec<String>) {
    if parens {
        out.push("(".to_string());
        write_tokens(tree, out);
        out.push(")".to_string());
    } else {
        write_tokens(tree, out);
    }
}

/// Evaluate exactly. Division by zero anywhere yields `Undefined`.
pub fn evaluate(tree: &ExprTree, numbers: &NumberTable) -> Result<ExprValue, ExprError> {
    match tree {
        ExprTree::Leaf(Operand::Num(i)) => numbers
            .get(*i)
            .map(|v| ExprValue::Defined(v.clone()))
            .ok_or(ExprError::MissingNumber(*i)),
        ExprTree::Leaf(Operand::Const(c)) => Ok(ExprValue::Defined(c.value().clone())),
        ExprTree::Node { op, left, right } => {
            let l = evaluate(left, numbers)?;
            let r = evaluate(right, numbers)?;
            let (ExprValue::Defined(l), ExprValue::Defined(r)) = (l, r) else {
                return Ok(ExprValue::Undefined);
            };
            Ok(match op {
                Op::Add => ExprValue::Defined(l + r),
                Op::Sub => ExprValue::Defined(l - r),
                Op::Mul => ExprValue::Defined(l * r),
                Op::Div if r.is_zero() => ExprValue::Undefined,
                Op::Div => ExprValue::Defined(l / r),
            })
        }
    }
}

/// Exact equality of two defined values. `Undefined` equals nothing, itself included.
pub fn results_equal(a: &ExprValue, b: &ExprValue) -> bool {
    match (a, b) {
        (ExprValue::Defined(x), ExprValue::Defined(y)) => x == y,
        _ => false,
    }
}

/// Random tree with depth at most `max_depth` over `NUM0..NUM{num_count-1}`.
///
/// Each subtree becomes a leaf with probability 0.3 (always at the depth limit).
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, max_depth: usize, num_count: usize) -> ExprTree {
    assert!(num_count > 0, "random_tree needs at least one number token");
    if max_depth == 0 || rng.gen_bool(0.3) {
        return ExprTree::num(rng.gen_range(0..num_count));
    }
    let op = Op::ALL[rng.gen_range(0..4)];
    let left = random_tree(rng, max_depth - 1, num_count);
    let right = random_tree(rng, max_depth - 1, num_count);
    ExprTree::node(op, left, right)
}
