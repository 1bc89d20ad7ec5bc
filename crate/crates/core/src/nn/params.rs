use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Dotted path, e.g. `decoder.layers.2.ffn.up.weight`.
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are never updated and take no gradient.
    pub frozen: bool,
}

/// Ordered, named parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix drawn from N(0, std²).
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter, NnError> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Freezes every parameter whose name does not satisfy `trainable`.
    pub fn set_trainable<F: Fn(&str) -> bool>(&mut self, trainable: F) {
        for p in &mut self.params {
            p.frozen = !trainable(&p.name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    /// Returns the names that were copied.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<Vec<String>, NnError> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.value.shape != p.value.shape {
                    return Err(NnError::ShapeMismatch {
                        op: "load_from",
                        left: p.value.shape.clone(),
                        right: src.value.shape.clone(),
                    });
                }
                p.value = src.value.clone();
                copied.push(p.name.clone());
            }
        }
        Ok(copied)
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
