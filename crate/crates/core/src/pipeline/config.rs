use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{BankSettings, BankStrategy, StrategyKind, DEFAULT_BANK_SIZE, DEFAULT_BEAM_SIZE};
use crate::model::{AdamWConfig, LossWeights, ModelConfig};

use super::PipelineError;

/// How the ranker is trained after the generator is fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointMode {
    /// Both losses update every parameter.
    Joint,
    /// Only the ranking head is trained; backbone and generator are frozen.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Ranking head hidden width; defaults to `d_model`.
    pub rank_hidden: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { d_model: 64, heads: 4, ff_dim: 128, encoder_layers: 2, decoder_layers: 2, rank_hidden: None }
    }
}

impl ArchConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            rank_hidden: self.rank_hidden.unwrap_or(self.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub finetune_epochs: usize,
    pub joint_epochs: usize,
    pub beam_size: usize,
    pub bank_size: usize,
    pub strategy: StrategyKind,
    pub online: bool,
    /// Disturbance draws per problem; unset means `bank_size - beam_size`.
    pub disturb_count: Option<usize>,
    pub joint_mode: JointMode,
    pub batch_size: usize,
    pub rank_batch_size: usize,
    pub positive_ratio: f64,
    pub generation_weight: f64,
    pub ranking_weight: f64,
    pub optimizer: AdamWConfig,
    /// Decoder length limit, counting `[bos]` and `[eos]`.
    pub max_len: usize,
    pub model: ArchConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            finetune_epochs: 50,
            joint_epochs: 50,
            beam_size: DEFAULT_BEAM_SIZE,
            bank_size: DEFAULT_BANK_SIZE,
            strategy: StrategyKind::ModelTree,
            online: true,
            disturb_count: None,
            joint_mode: JointMode::Joint,
            batch_size: 16,
            rank_batch_size: 16,
            positive_ratio: 0.5,
            generation_weight: 1.0,
            ranking_weight: 1.0,
            optimizer: AdamWConfig::default(),
            max_len: 24,
            model: ArchConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.beam_size == 0 || self.bank_size == 0 {
            return fail("beam_size and bank_size must be at least 1");
        }
        if self.batch_size == 0 || self.rank_batch_size == 0 {
            return fail("batch sizes must be at least 1");
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2");
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return fail("positive_ratio must lie in (0, 1)");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || !(0.0..=1.0).contains(&o.warmup_ratio) {
            return fail("optimizer settings out of range");
        }
        if self.generation_weight < 0.0 || self.ranking_weight < 0.0 {
            return fail("loss weights must be non-negative");
        }
        self.model.model_config(1).validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn bank_settings(&self) -> BankSettings {
        BankSettings {
            strategy: BankStrategy { kind: self.strategy, online: self.online },
            beam_size: self.beam_size,
            bank_size: self.bank_size,
            disturb_count: self.disturb_count,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { generation: self.generation_weight, ranking: self.ranking_weight }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
