//! Fine-tuning, expression-bank construction and joint training, one epoch at a time.

use serde::{Deserialize, Serialize};

use crate::bank::{build_bank, BankRecord, ExpressionBank};
use crate::exprcore::MappedProblem;
use crate::model::{AdamW, AdamWState, GenExample, Model, ModelParams, ParamGroup, RankExample, Vocab};
use crate::seeding::derive_rng;

use rand::seq::SliceRandom;

use super::beam::ModelGenerator;
use super::config::{JointMode, TrainConfig};
use super::eval::evaluate_accuracy;
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Finetune,
    Joint,
    Done,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    /// One-based within the phase.
    pub epoch: usize,
    #[serde(rename = "J_GEN")]
    pub j_gen: Option<f64>,
    #[serde(rename = "J_RANK")]
    pub j_rank: Option<f64>,
    pub bank_pos: Option<usize>,
    pub bank_neg: Option<usize>,
    /// Whether the bank used in this epoch was (re)built for it.
    pub bank_rebuilt: bool,
    pub dev_accuracy: Option<f64>,
}

/// Everything needed to continue an interrupted run, apart from the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config_hash: String,
    pub phase: Phase,
    pub epoch: usize,
    pub optimizer: Option<AdamWState>,
    pub bank: Option<Vec<BankRecord>>,
    pub log: Vec<EpochLog>,
}

/// Fresh model for `train`: vocabulary from the data, seeded initialization.
pub fn init_model(train: &[MappedProblem], config: &TrainConfig) -> Result<Model, PipelineError> {
    config.validate()?;
    let vocab = Vocab::build(train);
    let model_config = config.model.model_config(vocab.len());
    let params = ModelParams::init(&model_config, &mut derive_rng(config.seed, "init", ""))?;
    Ok(Model::new(params, vocab)?)
}

pub struct Trainer<'d> {
    config: TrainConfig,
    train: &'d [MappedProblem],
    dev: Option<&'d [MappedProblem]>,
    sources: Vec<Vec<usize>>,
    targets: Vec<Option<Vec<usize>>>,
    model: Model,
    phase: Phase,
    epoch: usize,
    optimizer: Option<AdamW>,
    bank: Option<ExpressionBank>,
    log: Vec<EpochLog>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        config: TrainConfig,
        model: Model,
        train: &'d [MappedProblem],
        dev: Option<&'d [MappedProblem]>,
    ) -> Result<Trainer<'d>, PipelineError> {
        config.validate()?;
        if train.is_empty() {
            return Err(PipelineError::Config("the training set is empty".into()));
        }
        let sources = train.iter().map(|p| model.vocab.encode(&p.tokens)).collect::<Result<Vec<_>, _>>()?;
        let targets = train.iter().map(|p| model.vocab.encode_expression(&p.ground_truth).ok()).collect();
        Ok(Trainer {
            config,
            train,
            dev,
            sources,
            targets,
            model,
            phase: Phase::Finetune,
            epoch: 0,
            optimizer: None,
            bank: None,
            log: Vec::new(),
        })
    }

    /// Continue from a saved state; `model` must hold the parameters saved with it.
    pub fn resume(
        config: TrainConfig,
        model: Model,
        train: &'d [MappedProblem],
        dev: Option<&'d [MappedProblem]>,
        state: TrainerState,
    ) -> Result<Trainer<'d>, PipelineError> {
        if state.config_hash != config.hash() {
            return Err(PipelineError::Config("saved training state belongs to a different configuration".into()));
        }
        let mut trainer = Trainer::new(config, model, train, dev)?;
        trainer.phase = state.phase;
        trainer.epoch = state.epoch;
        trainer.log = state.log;
        if let Some(records) = state.bank {
            trainer.bank = Some(ExpressionBank::from_records(train, &records, trainer.config.bank_size)?);
        }
        if let Some(saved) = state.optimizer {
            let mut optimizer = trainer.new_optimizer();
            optimizer.restore(saved)?;
            trainer.optimizer = Some(optimizer);
        }
        Ok(trainer)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config_hash: self.config.hash(),
            phase: self.phase,
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(AdamW::state),
            bank: self.bank.as_ref().map(|b| b.records().collect()),
            log: self.log.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn bank(&self) -> Option<&ExpressionBank> {
        self.bank.as_ref()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    fn new_optimizer(&self) -> AdamW {
        let (epochs, groups): (usize, &[ParamGroup]) = match (self.phase, self.config.joint_mode) {
            (Phase::Finetune, _) => (self.config.finetune_epochs, &[ParamGroup::Shared, ParamGroup::Generation]),
            (_, JointMode::Joint) => {
                (self.config.joint_epochs, &[ParamGroup::Shared, ParamGroup::Generation, ParamGroup::Ranking])
            }
            (_, JointMode::TwoStage) => (self.config.joint_epochs, &[ParamGroup::Ranking]),
        };
        let total = epochs as u64 * self.batches_per_epoch();
        AdamW::new(self.config.optimizer.clone(), &self.model.params, total, groups)
    }

    /// Run the next epoch; `None` once both phases are complete.
    pub fn run_epoch(&mut self) -> Result<Option<EpochLog>, PipelineError> {
        loop {
            match self.phase {
                Phase::Finetune if self.epoch < self.config.finetune_epochs => break,
                Phase::Finetune => {
                    self.phase = Phase::Joint;
                    self.epoch = 0;
                    self.optimizer = None;
                }
                Phase::Joint if self.epoch < self.config.joint_epochs => break,
                Phase::Joint => {
                    self.phase = Phase::Done;
                    self.optimizer = None;
                }
                Phase::Done => return Ok(None),
            }
        }
        if self.optimizer.is_none() {
            self.optimizer = Some(self.new_optimizer());
        }
        let entry = match self.phase {
            Phase::Finetune => self.finetune_epoch()?,
            _ => self.joint_epoch()?,
        };
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(Some(entry))
    }

    /// Run epochs until done or `halt_after` epochs have run in this call.
    /// `on_epoch` sees the trainer after every epoch (for checkpointing).
    pub fn run(
        &mut self,
        halt_after: Option<usize>,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<(), PipelineError>,
    ) -> Result<(), PipelineError> {
        let mut ran = 0;
        while halt_after.is_none_or(|n| ran < n) {
            match self.run_epoch()? {
                Some(entry) => on_epoch(self, &entry)?,
                None => break,
            }
            ran += 1;
        }
        Ok(())
    }

    fn epoch_order(&self, tag: &str) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).filter(|&i| self.targets[i].is_some()).collect();
        order.shuffle(&mut derive_rng(self.config.seed, tag, &self.epoch.to_string()));
        order
    }

    fn gen_batch(&self, indices: &[usize]) -> Vec<GenExample> {
        indices
            .iter()
            .map(|&i| GenExample {
                source: self.sources[i].clone(),
                target: self.targets[i].clone().expect("order only holds encodable targets"),
            })
            .collect()
    }

    fn finetune_epoch(&mut self) -> Result<EpochLog, PipelineError> {
        let order = self.epoch_order("finetune-order");
        let mut optimizer = self.optimizer.take().expect("optimizer prepared");
        let result = (|| {
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = self.gen_batch(chunk);
                let report = self.model.joint_step(&batch, &[], self.config.loss_weights(), &mut optimizer)?;
                total += report.j_gen.expect("generation batch present") * chunk.len() as f64;
            }
            Ok::<f64, PipelineError>(total / order.len().max(1) as f64)
        })();
        self.optimizer = Some(optimizer);
        let j_gen = result?;
        let dev_accuracy = self.dev_accuracy(|r| r.overall.top1_accuracy)?;
        Ok(EpochLog {
            phase: Phase::Finetune,
            epoch: self.epoch + 1,
            j_gen: Some(j_gen),
            j_rank: None,
            bank_pos: None,
            bank_neg: None,
            bank_rebuilt: false,
            dev_accuracy,
        })
    }

    fn build_bank(&self, round: u64) -> Result<ExpressionBank, PipelineError> {
        let generator = ModelGenerator { model: &self.model, max_len: self.config.max_len };
        Ok(build_bank(self.train, &generator, &self.config.bank_settings(), self.config.seed, round)?)
    }

    fn joint_epoch(&mut self) -> Result<EpochLog, PipelineError> {
        // The bank for epoch e > 1 is the rebuild that follows epoch e - 1.
        let rebuilt = self.bank.is_none() || (self.config.online && self.epoch > 0);
        if rebuilt {
            self.bank = Some(self.build_bank(self.epoch as u64)?);
        }
        let order = self.epoch_order("joint-order");
        let mut rank_rng = derive_rng(self.config.seed, "rank-sample", &self.epoch.to_string());
        let mut optimizer = self.optimizer.take().expect("optimizer prepared");
        let train_generator = self.config.joint_mode == JointMode::Joint;
        let result = (|| {
            let bank = self.bank.as_ref().expect("bank prepared");
            let (mut gen_total, mut rank_total, mut steps) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let gen = if train_generator { self.gen_batch(chunk) } else { Vec::new() };
                let rank: Vec<RankExample> = bank
                    .sample_ranking_batch(self.config.rank_batch_size, self.config.positive_ratio, &mut rank_rng)?
                    .into_iter()
                    .filter_map(|s| {
                        let sequence = self.model.vocab.encode_expression(&s.expr.expr).ok()?;
                        Some(RankExample { source: self.sources[s.problem].clone(), sequence, label: s.expr.label.is_positive() })
                    })
                    .collect();
                if gen.is_empty() && rank.is_empty() {
                    continue;
                }
                let report = self.model.joint_step(&gen, &rank, self.config.loss_weights(), &mut optimizer)?;
                gen_total += report.j_gen.unwrap_or(0.0) * gen.len() as f64;
                rank_total += report.j_rank.unwrap_or(0.0);
                steps += 1;
            }
            Ok::<_, PipelineError>((gen_total / order.len().max(1) as f64, rank_total / steps.max(1) as f64))
        })();
        self.optimizer = Some(optimizer);
        let (j_gen, j_rank) = result?;
        let bank = self.bank.as_ref().expect("bank prepared");
        let (bank_pos, bank_neg) = (bank.positive_count(), bank.negative_count());
        let dev_accuracy = self.dev_accuracy(|r| r.overall.accuracy)?;
        Ok(EpochLog {
            phase: Phase::Joint,
            epoch: self.epoch + 1,
            j_gen: train_generator.then_some(j_gen),
            j_rank: Some(j_rank),
            bank_pos: Some(bank_pos),
            bank_neg: Some(bank_neg),
            bank_rebuilt: rebuilt,
            dev_accuracy,
        })
    }

    fn dev_accuracy(&self, pick: impl Fn(&super::eval::Report) -> f64) -> Result<Option<f64>, PipelineError> {
        match self.dev {
            Some(dev) if !dev.is_empty() => {
                let (report, _) = evaluate_accuracy(&self.model, dev, self.config.beam_size, self.config.max_len)?;
                Ok(Some(pick(&report)))
            }
            _ => Ok(None),
        }
    }
}

/// Fine-tune the generator alone for `config.finetune_epochs` epochs.
pub fn finetune_generator(model: Model, train: &[MappedProblem], config: &TrainConfig) -> Result<(Model, Vec<EpochLog>), PipelineError> {
    let config = TrainConfig { joint_epochs: 0, ..config.clone() };
    let mut trainer = Trainer::new(config, model, train, None)?;
    trainer.run(None, |_, _| Ok(()))?;
    let log = trainer.log().to_vec();
    Ok((trainer.into_model(), log))
}

/// Build the bank and train jointly for `config.joint_epochs` epochs.
pub fn joint_train(
    model: Model,
    train: &[MappedProblem],
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>, Option<ExpressionBank>), PipelineError> {
    let config = TrainConfig { finetune_epochs: 0, ..config.clone() };
    let mut trainer = Trainer::new(config, model, train, None)?;
    trainer.run(None, |_, _| Ok(()))?;
    let log = trainer.log().to_vec();
    let bank = trainer.bank.take();
    Ok((trainer.into_model(), log, bank))
}
