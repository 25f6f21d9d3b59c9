//! Named trainable tensors and the binding of those tensors onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{G2gError, Result};
use crate::matrix::Matrix;
use crate::tape::{Adjoints, Tape, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

/// Insertion-ordered parameter table. Gradients always share their value's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(G2gError::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Registers a `rows x cols` weight drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.register(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| &mut self.entries[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * g` into the gradient slot of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix, scale: f64) {
        self.entries[id.0].grad.axpy(scale, g);
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

/// A tape plus lazily created leaves for the parameters a forward pass reads.
pub struct Trace<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Trace<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Trace {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters read during the pass, with their gradients from `adj`.
    /// Frozen (non-trainable) parameters are skipped.
    pub fn param_grads(&self, adj: &mut Adjoints) -> Vec<(ParamId, Matrix)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| self.store.get(*id).trainable)
            .filter_map(|(id, v)| adj.take(v).map(|g| (id, g)))
            .collect()
    }
}

impl Deref for Trace<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Trace<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.register("w", Matrix::zeros(2, 2)).unwrap();
        assert!(s.register("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn zero_grads_leaves_values() {
        let mut s = ParamStore::new();
        let id = s.register("w", Matrix::filled(2, 3, 1.5)).unwrap();
        s.accumulate_grad(id, &Matrix::filled(2, 3, 2.0), 0.5);
        assert_eq!(s.get(id).grad, Matrix::filled(2, 3, 1.0));
        s.zero_grads();
        assert_eq!(s.get(id).grad, Matrix::zeros(2, 3));
        assert_eq!(s.value(id), &Matrix::filled(2, 3, 1.5));
        assert_eq!(s.get(id).grad.shape(), s.value(id).shape());
    }

    #[test]
    fn trace_binds_each_param_once() {
        let mut s = ParamStore::new();
        let id = s.register("w", Matrix::filled(1, 1, 3.0)).unwrap();
        let mut tr = Trace::new(&s);
        let a = tr.param(id);
        let b = tr.param(id);
        assert_eq!(a, b);
        let p = tr.mul(a, b).unwrap();
        let mut adj = tr.backward(p);
        let grads = tr.param_grads(&mut adj);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data()[0], 6.0);
    }
}
