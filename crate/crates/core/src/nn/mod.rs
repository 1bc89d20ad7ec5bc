//! A small reverse-mode autograd engine and the layers built on it.
//!
//! Parameters are stored as `f32`. Graph arithmetic runs in `f64` so that
//! finite-difference checks at `h = 1e-4` are meaningful.

pub mod check;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),
    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange { op: &'static str, index: usize, limit: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(NnError::ShapeMismatch { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: vectors are a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

/// Boolean attention mask, `true` where attending is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// Lower-triangular: row `t` sees columns `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            for c in 0..=r {
                allowed[r * n + c] = true;
            }
        }
        Self { rows: n, cols: n, allowed }
    }

    /// Everything except the diagonal.
    pub fn off_diagonal(n: usize) -> Self {
        let mut m = Self::full(n, n);
        for i in 0..n {
            m.allowed[i * n + i] = false;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}
