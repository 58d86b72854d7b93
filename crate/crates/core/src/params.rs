//! Learnable parameters and their registry.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named weight with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Ordered collection of parameters; names are unique dotted paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroed gradient buffers, one per parameter.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) bufs: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    /// `self += other`, element by element in index order.
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Euclidean norm over all buffers.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.bufs.iter().flatten().map(|g| g * g).sum::<f64>())
    }

    pub fn clear(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }
}

/// Registers parameters under a dotted prefix with seeded initialisation.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RngStream,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut RngStream) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder for a child scope, e.g. `decoder` -> `decoder.layer0`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, value))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform(-bound, bound)).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::new(shape, data)?)
    }

    /// Gaussian with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::new(shape, data)?)
    }
}
