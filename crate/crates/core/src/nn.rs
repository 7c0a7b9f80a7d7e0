//! Small layers shared by the encoders and the generator, expressed on a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamStore, Partition, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const MASKED: f64 = -1e9;

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub partition: Partition,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store
            .insert(name, self.partition, Tensor::matrix(rows, cols, data)?)
    }

    /// Glorot-uniform weight matrix.
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.store
            .insert(name, self.partition, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn fill(&mut self, name: String, cols: usize, value: f64) -> Result<()> {
        self.store
            .insert(name, self.partition, Tensor::matrix(1, cols, vec![value; cols])?)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.fill(format!("{prefix}.g"), dim, 1.0)?;
        self.fill(format!("{prefix}.b"), dim, 0.0)
    }

    pub fn attention(&mut self, prefix: &str, dim: usize) -> Result<()> {
        for w in ["q", "k", "v", "o"] {
            self.weight(format!("{prefix}.{w}"), dim, dim)?;
        }
        Ok(())
    }

    pub fn feed_forward(&mut self, prefix: &str, dim: usize, hidden: usize) -> Result<()> {
        self.weight(format!("{prefix}.w1"), dim, hidden)?;
        self.fill(format!("{prefix}.b1"), hidden, 0.0)?;
        self.weight(format!("{prefix}.w2"), hidden, dim)?;
        self.fill(format!("{prefix}.b2"), dim, 0.0)
    }
}

pub(crate) fn layer_norm(t: &mut Tape, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = t.param(p, &format!("{prefix}.g"))?;
    let b = t.param(p, &format!("{prefix}.b"))?;
    Ok(t.layer_norm_rows(x, g, b, LN_EPS))
}

/// `x · W + b`.
pub(crate) fn linear(t: &mut Tape, p: &ParamStore, w: &str, b: &str, x: Var) -> Result<Var> {
    let wv = t.param(p, w)?;
    let bv = t.param(p, b)?;
    let h = t.matmul(x, wv);
    Ok(t.add(h, bv))
}

pub(crate) fn feed_forward(t: &mut Tape, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(t, p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)?;
    let h = t.gelu(h);
    linear(t, p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h)
}

/// Multi-head scaled dot-product attention of `query_in` over `kv_in`.
/// `mask`, when given, is added to the score matrix of every head.
pub(crate) fn attention(
    t: &mut Tape,
    p: &ParamStore,
    prefix: &str,
    query_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let wq = t.param(p, &format!("{prefix}.q"))?;
    let wk = t.param(p, &format!("{prefix}.k"))?;
    let wv = t.param(p, &format!("{prefix}.v"))?;
    let wo = t.param(p, &format!("{prefix}.o"))?;
    let q = t.matmul(query_in, wq);
    let k = t.matmul(kv_in, wk);
    let v = t.matmul(kv_in, wv);
    let dim = t.value(q).cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let scores = t.matmul_t(qh, kh);
        let mut scores = t.scale(scores, scale);
        if let Some(m) = mask {
            scores = t.add(scores, m);
        }
        let weights = t.softmax_rows(scores);
        outs.push(t.matmul(weights, vh));
    }
    let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    Ok(t.matmul(cat, wo))
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// number above it.
pub(crate) fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::matrix(n, n, data).expect("square mask")
}
