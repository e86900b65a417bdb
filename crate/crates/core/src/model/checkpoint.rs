//! Versioned JSON checkpoints: model configuration, vocabulary and named tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use super::vocab::Vocab;
use super::{Model, ModelError};

pub const CHECKPOINT_FORMAT: &str = "genrank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str) -> Checkpoint {
        let tensors = model
            .params
            .names()
            .iter()
            .zip(&model.params.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            model: model.config().clone(),
            vocab: model.vocab.tokens().to_vec(),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let vocab = Vocab::from_tokens(self.vocab)?;
        let named = self
            .tensors
            .into_iter()
            .map(|t| {
                let shape = (t.shape[0], t.shape[1]);
                Array2::from_shape_vec(shape, t.data)
                    .map(|a| (t.name.clone(), a))
                    .map_err(|_| ModelError::Shape(format!("tensor '{}' data does not fill shape {:?}", t.name, t.shape)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = ModelParams::from_tensors(&self.model, named)?;
        Model::new(params, vocab)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, config_hash: &str) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &Checkpoint::from_model(model, config_hash))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint; returns the model and the stored configuration hash.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, String), ModelError> {
    let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let hash = checkpoint.config_hash.clone();
    Ok((checkpoint.into_model()?, hash))
}
