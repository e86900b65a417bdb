//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced by index into the model's tensor list, so recording never copies
//! weights. [`Tape::backward`] accumulates parameter gradients into a
//! [`GradientBundle`].

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::GradientBundle;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Embed { table: usize, ids: Vec<usize>, scale: f64 },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>> },
    Row(Var, usize),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<f64> },
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

pub fn sinusoidal_position(pos: usize, d: usize) -> impl Iterator<Item = f64> {
    (0..d).map(move |j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Row-wise log-softmax in place.
pub fn log_softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row -= log_sum;
    }
}

/// Layer normalization of each row; returns `(normalized, 1 / std per row)`.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= inv_std;
        inv.push(inv_std);
    }
    (xhat, inv)
}

/// Multi-head scaled dot-product attention. Returns the output and per-head probabilities.
pub fn attention_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    causal: bool,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if causal {
            for ((i, j), s) in scores.indexed_iter_mut() {
                if j > i {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

fn sum_rows(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Tape<'p> {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(value)) => value,
            (_, None) => unreachable!("non-parameter nodes hold a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(index), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// `scale * table[ids] + positional encoding`.
    pub fn embed(&mut self, table: usize, ids: &[usize], scale: f64) -> Var {
        let t = &self.params[table];
        let d = t.ncols();
        let mut value = Array2::zeros((ids.len(), d));
        for (pos, (&id, mut row)) in ids.iter().zip(value.rows_mut()).enumerate() {
            for ((out, &w), pe) in row.iter_mut().zip(t.row(id)).zip(sinusoidal_position(pos, d)) {
                *out = scale * w + pe;
            }
        }
        self.push(Op::Embed { table, ids: ids.to_vec(), scale }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    /// `x + b` with the `1 x n` row `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.push(Op::AddRow(x, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    /// `x W + b` for parameter indices `w`, `b`.
    pub fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(Op::Gelu(x), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn layer_norm(&mut self, x: Var, gain: usize, bias: usize) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x).view());
        let g = self.param(gain);
        let b = self.param(bias);
        let value = &xhat * self.value(g) + self.value(b);
        self.push(Op::LayerNorm { x, gain: g, bias: b, xhat, inv_std }, value)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (value, probs) =
            attention_forward(self.value(q).view(), self.value(k).view(), self.value(v).view(), heads, causal);
        self.push(Op::Attention { q, k, v, heads, probs }, value)
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let value = self.value(x).slice(s![index..index + 1, ..]).to_owned();
        self.push(Op::Row(x, index), value)
    }

    /// Summed negative log-likelihood of `targets[i]` under row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        softmax_rows(&mut probs);
        let loss: f64 = targets.iter().enumerate().map(|(i, &t)| -probs[[i, t]].ln()).sum();
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, Array2::from_elem((1, 1), loss))
    }

    /// Add `scale * d(output)/d(param)` for every parameter into `grads`.
    pub fn backward(&self, output: Var, scale: f64, grads: &mut GradientBundle) {
        let mut node_grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(output).dim();
        node_grads[output.0] = Some(Array2::from_elem(shape, scale));

        fn acc(node_grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut node_grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => grads.tensors[*p] += &g,
                Op::Embed { table, ids, scale } => {
                    let target = &mut grads.tensors[*table];
                    for (&id, row) in ids.iter().zip(g.rows()) {
                        target.row_mut(id).scaled_add(*scale, &row);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut node_grads, *a, da);
                    acc(&mut node_grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    acc(&mut node_grads, *b, sum_rows(&g));
                    acc(&mut node_grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut node_grads, *a, g.clone());
                    acc(&mut node_grads, *b, g);
                }
                Op::Gelu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &v| *d *= gelu_grad(v));
                    acc(&mut node_grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().expect("tanh output stored");
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                    acc(&mut node_grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    acc(&mut node_grads, *gain, sum_rows(&(&g * xhat)));
                    acc(&mut node_grads, *bias, sum_rows(&g));
                    let dxhat = &g * self.value(*gain);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum = dh.sum();
                        let dot = dh.dot(&xh);
                        let mut out = dx.row_mut(r);
                        for j in 0..dh.len() {
                            out[j] = inv_std[r] / d * (d * dh[j] - sum - xh[j] * dot);
                        }
                    }
                    acc(&mut node_grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        let dp = go.dot(&vv.slice(cols).t());
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let total = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|s, &pp| *s -= pp * total);
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    acc(&mut node_grads, *q, dq);
                    acc(&mut node_grads, *k, dk);
                    acc(&mut node_grads, *v, dv);
                }
                Op::Row(x, r) => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.row_mut(*r).assign(&g.row(0));
                    acc(&mut node_grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let upstream = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        dl[[row, t]] -= 1.0;
                    }
                    dl *= upstream;
                    acc(&mut node_grads, *logits, dl);
                }
            }
        }
    }
}
