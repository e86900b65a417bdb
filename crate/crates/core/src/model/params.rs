use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub rank_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.vocab_size, self.d_model, self.heads, self.ff_dim, self.rank_hidden];
        if dims.contains(&0) {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Which part of the network a tensor belongs to; used to freeze groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Shared,
    Generation,
    Ranking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayer {
    pub attn_norm: NormParams,
    pub attn: AttentionParams,
    pub ff_norm: NormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayer {
    pub self_norm: NormParams,
    pub self_attn: AttentionParams,
    pub cross_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub ff_norm: NormParams,
    pub ff: FeedForwardParams,
}

/// Tensor indices for every named part of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: usize,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: NormParams,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: NormParams,
    pub out_w: usize,
    pub out_b: usize,
    pub rank_w1: usize,
    pub rank_b1: usize,
    pub rank_w2: usize,
    pub rank_b2: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: (usize, usize),
    group: ParamGroup,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), group: ParamGroup, init: Init) -> usize {
        self.specs.push(Spec { name, shape, group, init });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize, group: ParamGroup) -> usize {
        self.add(name, (rows, cols), group, Init::Uniform)
    }

    fn bias(&mut self, name: String, cols: usize, group: ParamGroup) -> usize {
        self.add(name, (1, cols), group, Init::Zeros)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), (1, d), ParamGroup::Shared, Init::Ones),
            bias: self.bias(format!("{prefix}.bias"), d, ParamGroup::Shared),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionParams {
        let g = ParamGroup::Shared;
        AttentionParams {
            wq: self.weight(format!("{prefix}.wq"), d, d, g),
            bq: self.bias(format!("{prefix}.bq"), d, g),
            wk: self.weight(format!("{prefix}.wk"), d, d, g),
            bk: self.bias(format!("{prefix}.bk"), d, g),
            wv: self.weight(format!("{prefix}.wv"), d, d, g),
            bv: self.bias(format!("{prefix}.bv"), d, g),
            wo: self.weight(format!("{prefix}.wo"), d, d, g),
            bo: self.bias(format!("{prefix}.bo"), d, g),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ff: usize) -> FeedForwardParams {
        let g = ParamGroup::Shared;
        FeedForwardParams {
            w1: self.weight(format!("{prefix}.w1"), d, ff, g),
            b1: self.bias(format!("{prefix}.b1"), ff, g),
            w2: self.weight(format!("{prefix}.w2"), ff, d, g),
            b2: self.bias(format!("{prefix}.b2"), d, g),
        }
    }
}

fn layout(config: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = config.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let embedding = b.weight("embedding".into(), config.vocab_size, d, ParamGroup::Shared);
    let encoder = (0..config.encoder_layers)
        .map(|l| EncoderLayer {
            attn_norm: b.norm(&format!("encoder.{l}.attn_norm"), d),
            attn: b.attention(&format!("encoder.{l}.attn"), d),
            ff_norm: b.norm(&format!("encoder.{l}.ff_norm"), d),
            ff: b.feed_forward(&format!("encoder.{l}.ff"), d, config.ff_dim),
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..config.decoder_layers)
        .map(|l| DecoderLayer {
            self_norm: b.norm(&format!("decoder.{l}.self_norm"), d),
            self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
            cross_norm: b.norm(&format!("decoder.{l}.cross_norm"), d),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
            ff_norm: b.norm(&format!("decoder.{l}.ff_norm"), d),
            ff: b.feed_forward(&format!("decoder.{l}.ff"), d, config.ff_dim),
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let out_w = b.weight("generator.w".into(), d, config.vocab_size, ParamGroup::Generation);
    let out_b = b.bias("generator.b".into(), config.vocab_size, ParamGroup::Generation);
    let rank_w1 = b.weight("ranker.w1".into(), d, config.rank_hidden, ParamGroup::Ranking);
    let rank_b1 = b.bias("ranker.b1".into(), config.rank_hidden, ParamGroup::Ranking);
    let rank_w2 = b.weight("ranker.w2".into(), config.rank_hidden, 2, ParamGroup::Ranking);
    let rank_b2 = b.bias("ranker.b2".into(), 2, ParamGroup::Ranking);
    let layout = Layout {
        embedding,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        out_w,
        out_b,
        rank_w1,
        rank_b1,
        rank_w2,
        rank_b2,
    };
    (layout, b.specs)
}

/// All trainable tensors. Biases and norm parameters are stored as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    pub tensors: Vec<Array2<f64>>,
}

impl ModelParams {
    /// Weights uniform in `[-INIT_RANGE, INIT_RANGE]`, biases zero, norm gains one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let (layout, specs) = layout(config);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Uniform => Array2::from_shape_simple_fn(s.shape, || rng.gen_range(-INIT_RANGE..=INIT_RANGE)),
                Init::Zeros => Array2::zeros(s.shape),
                Init::Ones => Array2::ones(s.shape),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            tensors,
        })
    }

    /// Rebuild from named tensors, checking every name and shape.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Array2<f64>)>) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let (layout, specs) = layout(config);
        if named.len() != specs.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, found {}", specs.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, tensor)) in specs.iter().zip(named) {
            if spec.name != name {
                return Err(ModelError::Shape(format!("expected tensor '{}', found '{name}'", spec.name)));
            }
            if tensor.dim() != spec.shape {
                return Err(ModelError::Shape(format!("tensor '{name}' has shape {:?}, expected {:?}", tensor.dim(), spec.shape)));
            }
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("tensor '{name}'")));
            }
            tensors.push(tensor);
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub tensors: Vec<Array2<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> GradientBundle {
        GradientBundle { tensors: params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect() }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            *t *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
