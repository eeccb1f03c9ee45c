//! Named parameter storage, initialization and gradient containers.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    /// Buffers such as normalization running statistics are not trainable.
    pub trainable: bool,
}

/// Flat registry of every tensor a model owns.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialization with the given fan-in/fan-out.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| {
            T::lit(self.rng.random_range(-bound..bound))
        });
        self.add(name, value, true)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_fn((rows, cols), |_| T::lit(self.rng.sample(dist)));
        self.add(name, value, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)), true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        self.add(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array2<T>) -> Result<()> {
        let current = &mut self.params[id.0];
        if current.value.dim() != value.dim() {
            return Err(Error::Shape {
                context: "parameter assignment",
                axis: "elements",
                expected: current.value.len(),
                got: value.len(),
            });
        }
        current.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Gradients {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, delta: &Array2<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
