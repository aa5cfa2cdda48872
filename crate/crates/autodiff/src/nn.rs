//! Layer building blocks on top of [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a forward pass binds a store's parameters.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, frozen: false }
    }

    /// Parameters enter the graph as constants; no gradient reaches them.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, frozen: true }
    }

    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.frozen {
            g.frozen(self.store, id)
        } else {
            g.param(self.store, id)
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Affine map `x W + b` with `W: [in, out]`, initialized U(-1/sqrt(in), 1/sqrt(in)).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), uniform(rng, &[input, output], bound))?;
        let bias = store.insert(format!("{name}.bias"), uniform(rng, &[output], bound))?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, x: Var) -> Result<Var> {
        let w = p.bind(g, self.weight);
        let b = p.bind(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps);
        let gamma = p.bind(g, self.gamma);
        let beta = p.bind(g, self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Plain ReLU multilayer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: Binder<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i != last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}
