//! Named parameter storage and seeded initialization.

use std::collections::HashMap;

use radarformer_tensor::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

/// Parameters in declaration order, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(config_err!("duplicate parameter {name}"));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Bound<'_> {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        Bound { index: &self.index, vars }
    }

    /// Names vars already in a graph, one per parameter in declaration order.
    pub fn attach(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.entries.len() {
            return Err(config_err!("{} vars for {} parameters", vars.len(), self.entries.len()));
        }
        Ok(Bound { index: &self.index, vars })
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| config_err!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Declares parameters with seeded fan-in scaled uniform initialization.
pub struct Builder<'a, E> {
    store: &'a mut ParamStore<E>,
    rng: ChaCha8Rng,
}

impl<'a, E: Scalar> Builder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Ok(Tensor::from_f64s(shape, &data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = Tensor::from_f64s(shape, &vec![value; shape.iter().product()])?;
        self.store.insert(name, t)
    }

    /// Weight `[cout, cin, k...]` plus optional bias `[cout]`.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, kernel: &[usize], bias: bool) -> Result<()> {
        let fan_in = cin * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let w = self.uniform(&shape, bound)?;
        self.store.insert(&format!("{name}.weight"), w)?;
        if bias {
            let b = self.uniform(&[cout], bound)?;
            self.store.insert(&format!("{name}.bias"), b)?;
        }
        Ok(())
    }

    /// Weight `[in, out]` plus bias `[out]`.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<()> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.uniform(&[inp, out], bound)?;
        self.store.insert(&format!("{name}.weight"), w)?;
        let b = self.uniform(&[out], bound)?;
        self.store.insert(&format!("{name}.bias"), b)
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.constant(&format!("{name}.gamma"), &[width], 1.0)?;
        self.constant(&format!("{name}.beta"), &[width], 0.0)
    }
}
