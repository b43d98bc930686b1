use hipa_tensor::{Element, Tape, Tensor};
use indexmap::IndexMap;
use rand::Rng as _;

use crate::error::{HipaError, Result};
use crate::rng::Rng;

/// Named trainable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(HipaError::DuplicateParam(name));
        }
        t.set_requires_grad(true);
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| HipaError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| HipaError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// A copy whose tensors are leaves on `tape`.
    pub fn watched(&self, tape: &Tape<T>) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.watch(v)))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn detached(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// True when both stores hold the same names, shapes and bits.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±√(1/fan_in).
    FanIn(usize),
    Uniform(f32),
    Const(f32),
}

/// Collects parameter declarations while a model is being laid out, then
/// initializes them in declaration order from one generator.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its name.
    pub fn declare(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> String {
        let name = name.into();
        assert!(
            !self.specs.iter().any(|(n, _, _)| *n == name),
            "parameter {name} declared twice"
        );
        self.specs.push((name.clone(), shape.into(), init));
        name
    }

    pub fn shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.specs.iter().map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }

    pub fn finish(&self, rng: &mut Rng) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, shape, init) in &self.specs {
            let t = match *init {
                Init::FanIn(fan_in) => {
                    let a = (1.0 / fan_in.max(1) as f32).sqrt();
                    Tensor::from_fn(shape.clone(), |_| rng.random_range(-a..=a))
                }
                Init::Uniform(a) => Tensor::from_fn(shape.clone(), |_| rng.random_range(-a..=a)),
                Init::Const(v) => Tensor::full(shape.clone(), v),
            };
            store.insert(name.clone(), t).expect("names are unique");
        }
        store
    }
}
