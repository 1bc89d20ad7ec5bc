//! Parameterized building blocks.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{Mask, NnError, Tensor};

/// Initialization scale for weight matrices.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = ps.add_normal(format!("{name}.weight"), &[in_dim, out_dim], INIT_STD, rng);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add_normal(format!("{name}.weight"), &[rows, dim], INIT_STD, rng);
        Self { table, rows, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, NnError> {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs, so the same block serves self- and cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(ps, &format!("{name}.key"), kv_dim, dim, rng),
            value: Linear::new(ps, &format!("{name}.value"), kv_dim, dim, rng),
            output: Linear::new(ps, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, mask: Option<&Mask>) -> Result<Var, NnError> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax(scores, mask)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, cat)
    }
}

/// Position-wise two-layer MLP with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}
