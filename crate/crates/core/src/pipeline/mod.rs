//! Training, inference and evaluation built from the model, bank and disturbance modules.

mod beam;
mod config;
mod eval;
mod solve;
mod train;

use std::io;

use thiserror::Error;

use crate::bank::BankError;
use crate::exprcore::ExprError;
use crate::model::ModelError;
use crate::synthdata::DataError;

pub use beam::{beam_search, hypothesis_order, BeamHypothesis, ModelGenerator};
pub use config::{ArchConfig, JointMode, TrainConfig};
pub use eval::{evaluate_accuracy, report_from_verdicts, verdict, write_verdicts, Report, Tally, Verdict};
pub use solve::{solve, Candidate, Choice, Solution};
pub use train::{finetune_generator, init_model, joint_train, EpochLog, Phase, Trainer, TrainerState};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
