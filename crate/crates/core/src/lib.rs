//! Generate & rank solver for math word problems.
//!
//! A small encoder-decoder is shared by two heads: a generator that proposes
//! solution expressions with beam search, and a ranker that scores
//! (problem, expression) pairs. The ranker is trained on an expression bank of
//! the generator's own beam outputs plus tree-disturbed ground truths, rebuilt
//! every joint-training epoch.

pub mod bank;
pub mod cli;
pub mod disturb;
pub mod exprcore;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod synthdata;
