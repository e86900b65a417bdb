//! Encoder-decoder with a generation head and a ranking head on a shared backbone.
//!
//! Layers use pre-normalization: each sublayer reads `LayerNorm(x)` and adds its
//! output back to `x`. Token embeddings are scaled by `sqrt(d_model)` and summed
//! with sinusoidal position encodings; encoder and decoder share the table.

mod checkpoint;
mod infer;
mod optim;
mod params;
mod tape;
mod vocab;

use std::io;

use ndarray::{Array1, Array2};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use infer::{DecoderState, IncrementalDecoder};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{GradientBundle, Layout, ModelConfig, ModelParams, ParamGroup, INIT_RANGE};
pub use tape::{gelu, sinusoidal_position, Tape, Var};
pub use vocab::{TokenKind, Vocab, BOS, EOS, PAD, UNK};

use params::{AttentionParams, FeedForwardParams, NormParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("tensor shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A problem paired with a target sequence `[bos] ... [eos]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// A problem paired with a candidate sequence `[bos] ... [eos]` and its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankExample {
    pub source: Vec<usize>,
    pub sequence: Vec<usize>,
    pub label: bool,
}

/// Relative weights of the two losses in a joint step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub generation: f64,
    pub ranking: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { generation: 1.0, ranking: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub j_gen: Option<f64>,
    pub j_rank: Option<f64>,
}

/// Parameters together with the vocabulary they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn new(params: ModelParams, vocab: Vocab) -> Result<Model, ModelError> {
        if params.config().vocab_size != vocab.len() {
            return Err(ModelError::Vocab(format!(
                "model expects {} tokens, vocabulary has {}",
                params.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Model { params, vocab })
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::DimensionMismatch(format!("empty {what}")));
        }
        let v = self.config().vocab_size;
        match ids.iter().find(|&&i| i >= v) {
            Some(bad) => Err(ModelError::DimensionMismatch(format!("{what} index {bad} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    /// Cut a ranking sequence after its first `[eos]`; it must start with `[bos]`.
    fn rank_prefix<'a>(&self, sequence: &'a [usize]) -> Result<&'a [usize], ModelError> {
        self.check_ids(sequence, "expression")?;
        if sequence[0] != self.vocab.bos() {
            return Err(ModelError::DimensionMismatch("expression must start with [bos]".into()));
        }
        let end = sequence
            .iter()
            .position(|&t| t == self.vocab.eos())
            .ok_or_else(|| ModelError::DimensionMismatch("expression has no [eos]".into()))?;
        Ok(&sequence[..=end])
    }

    fn check_target(&self, target: &[usize]) -> Result<(), ModelError> {
        self.check_ids(target, "target")?;
        let wrapped = target.len() >= 2 && target[0] == self.vocab.bos() && target[target.len() - 1] == self.vocab.eos();
        if !wrapped {
            return Err(ModelError::DimensionMismatch("target must be wrapped in [bos] ... [eos]".into()));
        }
        Ok(())
    }

    /// Encoder states, one row per source token.
    pub fn encode(&self, source: &[usize]) -> Result<Array2<f64>, ModelError> {
        self.check_ids(source, "source")?;
        let mut tape = Tape::new(&self.params.tensors);
        let r = encoder_forward(&mut tape, &self.params, source);
        Ok(tape.value(r).clone())
    }

    /// Next-token distribution after `prefix`, given encoder states `memory`.
    pub fn decode_step(&self, memory: &Array2<f64>, prefix: &[usize]) -> Result<Array1<f64>, ModelError> {
        self.check_ids(prefix, "prefix")?;
        if memory.ncols() != self.config().d_model || memory.nrows() == 0 {
            return Err(ModelError::DimensionMismatch(format!("encoder states of shape {:?}", memory.dim())));
        }
        let mut tape = Tape::new(&self.params.tensors);
        let m = tape.input(memory.clone());
        let states = decoder_forward(&mut tape, &self.params, m, prefix);
        let last = tape.row(states, prefix.len() - 1);
        let logits = tape.linear(last, self.params.layout().out_w, self.params.layout().out_b);
        let mut probs = tape.value(logits).clone();
        tape::softmax_rows(&mut probs);
        Ok(probs.row(0).to_owned())
    }

    fn generation_tape<'a>(&'a self, example: &GenExample) -> Result<(Tape<'a>, Var), ModelError> {
        self.check_ids(&example.source, "source")?;
        self.check_target(&example.target)?;
        let mut tape = Tape::new(&self.params.tensors);
        let memory = encoder_forward(&mut tape, &self.params, &example.source);
        let inputs = &example.target[..example.target.len() - 1];
        let states = decoder_forward(&mut tape, &self.params, memory, inputs);
        let logits = tape.linear(states, self.params.layout().out_w, self.params.layout().out_b);
        let loss = tape.cross_entropy(logits, &example.target[1..]);
        Ok((tape, loss))
    }

    fn ranking_tape<'a>(&'a self, source: &[usize], sequence: &[usize], label: bool) -> Result<(Tape<'a>, Var, Var), ModelError> {
        self.check_ids(source, "source")?;
        let sequence = self.rank_prefix(sequence)?;
        let mut tape = Tape::new(&self.params.tensors);
        let memory = encoder_forward(&mut tape, &self.params, source);
        let logits = rank_logits(&mut tape, &self.params, memory, sequence);
        let loss = tape.cross_entropy(logits, &[usize::from(label)]);
        Ok((tape, logits, loss))
    }

    /// Mean over the batch of the summed target negative log-likelihood.
    pub fn generation_loss(&self, batch: &[GenExample]) -> Result<(f64, GradientBundle), ModelError> {
        let mut grads = GradientBundle::zeros_like(&self.params);
        let loss = self.accumulate_generation(batch, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_generation(&self, batch: &[GenExample], weight: f64, grads: &mut GradientBundle) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::DimensionMismatch("empty generation batch".into()));
        }
        let scale = weight / batch.len() as f64;
        let mut total = 0.0;
        for example in batch {
            let (tape, loss) = self.generation_tape(example)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(ModelError::NonFinite("generation loss".into()));
            }
            total += value;
            tape.backward(loss, scale, grads);
        }
        Ok(total / batch.len() as f64)
    }

    /// `(Pr(0 | P, S), Pr(1 | P, S))` from the decoder state at the first `[eos]`.
    pub fn rank_score(&self, source: &[usize], sequence: &[usize]) -> Result<[f64; 2], ModelError> {
        self.check_ids(source, "source")?;
        let sequence = self.rank_prefix(sequence)?;
        let mut tape = Tape::new(&self.params.tensors);
        let memory = encoder_forward(&mut tape, &self.params, source);
        Ok(rank_probabilities(&mut tape, &self.params, memory, sequence))
    }

    /// `Pr(1 | P, S)` for several candidates of one problem, encoding the problem once.
    pub fn rank_scores(&self, source: &[usize], sequences: &[Vec<usize>]) -> Result<Vec<f64>, ModelError> {
        self.check_ids(source, "source")?;
        let mut tape = Tape::new(&self.params.tensors);
        let memory = encoder_forward(&mut tape, &self.params, source);
        let memory = tape.value(memory).clone();
        sequences
            .iter()
            .map(|sequence| {
                let sequence = self.rank_prefix(sequence)?;
                let mut tape = Tape::new(&self.params.tensors);
                let m = tape.input(memory.clone());
                Ok(rank_probabilities(&mut tape, &self.params, m, sequence)[1])
            })
            .collect()
    }

    /// Mean cross-entropy of the ranking head over the batch.
    pub fn ranking_loss(&self, batch: &[RankExample]) -> Result<(f64, GradientBundle), ModelError> {
        let mut grads = GradientBundle::zeros_like(&self.params);
        let loss = self.accumulate_ranking(batch, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_ranking(&self, batch: &[RankExample], weight: f64, grads: &mut GradientBundle) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::DimensionMismatch("empty ranking batch".into()));
        }
        let scale = weight / batch.len() as f64;
        let mut total = 0.0;
        for example in batch {
            let (tape, _, loss) = self.ranking_tape(&example.source, &example.sequence, example.label)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(ModelError::NonFinite("ranking loss".into()));
            }
            total += value;
            tape.backward(loss, scale, grads);
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer update on `w_gen * J_GEN + w_rank * J_RANK`.
    ///
    /// Either batch may be empty to train a single objective. On a non-finite
    /// loss or gradient the parameters are left untouched.
    pub fn joint_step(
        &mut self,
        gen_batch: &[GenExample],
        rank_batch: &[RankExample],
        weights: LossWeights,
        optimizer: &mut AdamW,
    ) -> Result<StepReport, ModelError> {
        if gen_batch.is_empty() && rank_batch.is_empty() {
            return Err(ModelError::DimensionMismatch("both batches are empty".into()));
        }
        let mut grads = GradientBundle::zeros_like(&self.params);
        let j_gen = if gen_batch.is_empty() {
            None
        } else {
            Some(self.accumulate_generation(gen_batch, weights.generation, &mut grads)?)
        };
        let j_rank = if rank_batch.is_empty() {
            None
        } else {
            Some(self.accumulate_ranking(rank_batch, weights.ranking, &mut grads)?)
        };
        optimizer.step(&mut self.params, &grads)?;
        Ok(StepReport { j_gen, j_rank })
    }
}

fn attention_block(tape: &mut Tape, x: Var, memory: Var, p: &AttentionParams, heads: usize, causal: bool) -> Var {
    let q = tape.linear(x, p.wq, p.bq);
    let k = tape.linear(memory, p.wk, p.bk);
    let v = tape.linear(memory, p.wv, p.bv);
    let a = tape.attention(q, k, v, heads, causal);
    tape.linear(a, p.wo, p.bo)
}

fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams) -> Var {
    let h = tape.linear(x, p.w1, p.b1);
    let h = tape.gelu(h);
    tape.linear(h, p.w2, p.b2)
}

fn norm(tape: &mut Tape, x: Var, p: &NormParams) -> Var {
    tape.layer_norm(x, p.gain, p.bias)
}

fn embedding_scale(params: &ModelParams) -> f64 {
    (params.config().d_model as f64).sqrt()
}

pub(crate) fn encoder_forward(tape: &mut Tape, params: &ModelParams, ids: &[usize]) -> Var {
    let layout = params.layout();
    let heads = params.config().heads;
    let mut x = tape.embed(layout.embedding, ids, embedding_scale(params));
    for layer in &layout.encoder {
        let h = norm(tape, x, &layer.attn_norm);
        let a = attention_block(tape, h, h, &layer.attn, heads, false);
        x = tape.add(x, a);
        let h = norm(tape, x, &layer.ff_norm);
        let f = feed_forward(tape, h, &layer.ff);
        x = tape.add(x, f);
    }
    norm(tape, x, &layout.encoder_norm)
}

pub(crate) fn decoder_forward(tape: &mut Tape, params: &ModelParams, memory: Var, ids: &[usize]) -> Var {
    let layout = params.layout();
    let heads = params.config().heads;
    let mut x = tape.embed(layout.embedding, ids, embedding_scale(params));
    for layer in &layout.decoder {
        let h = norm(tape, x, &layer.self_norm);
        let a = attention_block(tape, h, h, &layer.self_attn, heads, true);
        x = tape.add(x, a);
        let h = norm(tape, x, &layer.cross_norm);
        let c = attention_block(tape, h, memory, &layer.cross_attn, heads, false);
        x = tape.add(x, c);
        let h = norm(tape, x, &layer.ff_norm);
        let f = feed_forward(tape, h, &layer.ff);
        x = tape.add(x, f);
    }
    norm(tape, x, &layout.decoder_norm)
}

/// Two ranking logits from the decoder state of the last token of `sequence`.
fn rank_logits(tape: &mut Tape, params: &ModelParams, memory: Var, sequence: &[usize]) -> Var {
    let layout = params.layout();
    let states = decoder_forward(tape, params, memory, sequence);
    let last = tape.row(states, sequence.len() - 1);
    let h = tape.linear(last, layout.rank_w1, layout.rank_b1);
    let h = tape.tanh(h);
    tape.linear(h, layout.rank_w2, layout.rank_b2)
}

fn rank_probabilities(tape: &mut Tape, params: &ModelParams, memory: Var, sequence: &[usize]) -> [f64; 2] {
    let logits = rank_logits(tape, params, memory, sequence);
    let mut p = tape.value(logits).clone();
    tape::softmax_rows(&mut p);
    [p[[0, 0]], p[[0, 1]]]
}
