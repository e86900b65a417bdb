//! Token-at-a-time decoding with cached keys and values, for beam search.
//!
//! Computes the same function as the full decoder pass used in training; each
//! step feeds one token per hypothesis and returns next-token log-probabilities.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{AttentionParams, NormParams};
use super::tape::{attention_forward, gelu, log_softmax_rows, normalize_rows, sinusoidal_position};
use super::{Model, ModelError};

/// Self-attention cache of one hypothesis: per layer, keys and values of every fed token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    cross_keys: Vec<Array2<f64>>,
    cross_values: Vec<Array2<f64>>,
}

fn linear(model: &Model, x: &Array2<f64>, w: usize, b: usize) -> Array2<f64> {
    let t = &model.params.tensors;
    x.dot(&t[w]) + &t[b]
}

fn norm(model: &Model, x: &Array2<f64>, p: &NormParams) -> Array2<f64> {
    let t = &model.params.tensors;
    let (xhat, _) = normalize_rows(x.view());
    xhat * &t[p.gain] + &t[p.bias]
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Model, source: &[usize]) -> Result<IncrementalDecoder<'m>, ModelError> {
        let memory = model.encode(source)?;
        let (cross_keys, cross_values) = model
            .params
            .layout()
            .decoder
            .iter()
            .map(|layer| {
                let p = &layer.cross_attn;
                (linear(model, &memory, p.wk, p.bk), linear(model, &memory, p.wv, p.bv))
            })
            .unzip();
        Ok(IncrementalDecoder { model, cross_keys, cross_values })
    }

    pub fn initial_state(&self) -> DecoderState {
        let layers = self.model.params.layout().decoder.len();
        DecoderState { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    fn attend(&self, q: &Array2<f64>, keys: ArrayView2<f64>, values: ArrayView2<f64>, row: usize) -> Array2<f64> {
        let heads = self.model.config().heads;
        attention_forward(q.slice(s![row..row + 1, ..]), keys, values, heads, false).0
    }

    fn self_attention(&self, x: &Array2<f64>, p: &AttentionParams, layer: usize, states: &mut [DecoderState]) -> Array2<f64> {
        let d = self.model.config().d_model;
        let q = linear(self.model, x, p.wq, p.bq);
        let k = linear(self.model, x, p.wk, p.bk);
        let v = linear(self.model, x, p.wv, p.bv);
        let mut out = Array2::zeros(x.dim());
        for (i, state) in states.iter_mut().enumerate() {
            state.keys[layer].extend(k.row(i).iter());
            state.values[layer].extend(v.row(i).iter());
            let t = state.len + 1;
            let keys = ArrayView2::from_shape((t, d), &state.keys[layer]).expect("cache holds t rows");
            let values = ArrayView2::from_shape((t, d), &state.values[layer]).expect("cache holds t rows");
            out.row_mut(i).assign(&self.attend(&q, keys, values, i).row(0));
        }
        linear(self.model, &out, p.wo, p.bo)
    }

    fn cross_attention(&self, x: &Array2<f64>, p: &AttentionParams, layer: usize) -> Array2<f64> {
        let q = linear(self.model, x, p.wq, p.bq);
        let mut out = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            let o = self.attend(&q, self.cross_keys[layer].view(), self.cross_values[layer].view(), i);
            out.row_mut(i).assign(&o.row(0));
        }
        linear(self.model, &out, p.wo, p.bo)
    }

    /// Feed `tokens[i]` to `states[i]`; returns one row of log-probabilities per state.
    pub fn step(&self, states: &mut [DecoderState], tokens: &[usize]) -> Array2<f64> {
        assert_eq!(states.len(), tokens.len(), "one token per state");
        let model = self.model;
        let layout = model.params.layout();
        let t = &model.params.tensors;
        let d = model.config().d_model;
        let scale = (d as f64).sqrt();
        let mut x = Array2::zeros((tokens.len(), d));
        for (i, (&token, state)) in tokens.iter().zip(states.iter()).enumerate() {
            for ((out, &w), pe) in x.row_mut(i).iter_mut().zip(t[layout.embedding].row(token)).zip(sinusoidal_position(state.len, d)) {
                *out = scale * w + pe;
            }
        }
        for (l, layer) in layout.decoder.iter().enumerate() {
            let h = norm(model, &x, &layer.self_norm);
            x += &self.self_attention(&h, &layer.self_attn, l, states);
            let h = norm(model, &x, &layer.cross_norm);
            x += &self.cross_attention(&h, &layer.cross_attn, l);
            let h = norm(model, &x, &layer.ff_norm);
            let f = linear(model, &h, layer.ff.w1, layer.ff.b1).mapv(gelu);
            x += &linear(model, &f, layer.ff.w2, layer.ff.b2);
        }
        for state in states.iter_mut() {
            state.len += 1;
        }
        let h = norm(model, &x, &layout.decoder_norm);
        let mut logp = linear(model, &h, layout.out_w, layout.out_b);
        log_softmax_rows(&mut logp);
        logp
    }

    /// Log-probabilities after feeding `prefix` token by token from a fresh state.
    pub fn prefix_log_probs(&self, prefix: &[usize]) -> Array2<f64> {
        let mut state = [self.initial_state()];
        let mut rows = Vec::with_capacity(prefix.len());
        for &token in prefix {
            rows.push(self.step(&mut state, &[token]));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("rows share the vocabulary width")
    }
}
