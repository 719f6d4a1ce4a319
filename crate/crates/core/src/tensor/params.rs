use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, 1/fan_in), with fan_in the first dimension (or the product of all
    /// but the first for conv kernels).
    LeCun,
    Normal(f64),
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let fan_in = match shape {
            [f, _] => *f,
            [_, rest @ ..] => rest.iter().product::<usize>().max(1),
            _ => n.max(1),
        };
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::LeCun => sample_normal(n, 1.0 / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => sample_normal(n, std, rng),
        };
        let id = ParamId(self.tensors.len());
        let tensor = Tensor::new(shape.to_vec(), data).expect("shape product").with_grad(true);
        self.names.push(name.clone());
        self.tensors.push(tensor);
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (non)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
                if !trainable {
                    t.grad = None;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of every
    /// parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Overwrites values of parameters present in `other` by name.
    pub fn load_values(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} has no matching parameter")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {shape:?} differs from model shape {:?}",
                t.shape()
            )));
        }
        for (dst, src) in t.data_mut().iter_mut().zip(values) {
            *dst = T::lit(*src);
        }
        Ok(())
    }
}

fn sample_normal<T: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}
