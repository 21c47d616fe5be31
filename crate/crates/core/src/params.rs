//! Named parameter storage and the small layer building blocks shared by the
//! encoder and the sorting network.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::{Tensor, TensorError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; panics on duplicate names (a construction bug).
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(Rc::new(value));
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.tensors[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), &**t))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `g`; the result is indexed by `ParamId.0`.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf_shared(Rc::clone(t), requires_grad))
            .collect()
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self.id(name).ok_or_else(|| {
            TensorError::invalid("assign", alloc::format!("unknown parameter {name}"))
        })?;
        if self.get(id).shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: self.get(id).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = Rc::new(value);
        Ok(())
    }
}

/// Fan-based uniform init, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = math::sqrt(6.0 / (rows + cols) as f64);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("shape")
}

pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("shape")
}

/// Affine map `x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(
            &alloc::format!("{name}.weight"),
            xavier_uniform(fan_in, fan_out, rng),
        );
        let bias = store.insert(&alloc::format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, vars[self.weight.0])?;
        g.add(y, vars[self.bias.0])
    }

    /// Graph-free evaluation with the same arithmetic as [`Linear::forward`].
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let w = store.get(self.weight);
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = alloc::vec![0.0; rows * n];
        crate::kernels::matmul(x, w.data(), rows, k, n, &mut out);
        crate::kernels::add_bias(&mut out, store.get(self.bias).data());
        out
    }
}

/// Layer normalization parameters.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.insert(&alloc::format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.insert(&alloc::format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, vars[self.gamma.0], vars[self.beta.0], LN_EPS)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let d = gamma.len();
        let mut out = alloc::vec![0.0; x.len()];
        for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            crate::kernels::layer_norm_row(src, gamma, beta, LN_EPS, dst);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn xavier_bounds() {
        let mut r = rng::stream(1, rng::streams::INIT);
        let t = xavier_uniform(10, 6, &mut r);
        let a = math::sqrt(6.0 / 16.0);
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn linear_apply_matches_graph() {
        let mut r = rng::stream(2, rng::streams::INIT);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 5, 3, &mut r);
        let x = normal(4, 5, 1.0, &mut r);
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &vars, xv).unwrap();
        assert_eq!(g.value(y).data(), lin.apply(&store, x.data(), 4).as_slice());
    }

    #[test]
    fn assign_rejects_wrong_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2]));
        assert!(store.assign("w", Tensor::zeros(&[3])).is_err());
        assert!(store.assign("w", Tensor::identity(2)).is_ok());
    }
}
