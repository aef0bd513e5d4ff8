//! Parameterised layers: pointwise (1×1) linear maps, per-point layer
//! normalisation, ReLU and rowwise softmax, plus the parameter store and
//! its seeded initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseLinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            epsilon: LAYER_NORM_EPS,
        }
    }
}

/// `x·W + b` applied to every point independently.
pub fn pointwise_linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(weight));
    if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
        return Err(TensorError::Dimension {
            op: "pointwise_linear",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    let h = tape.matmul(x, weight)?;
    tape.add_row(h, bias)
}

pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Eager form of [`pointwise_linear`].
pub fn apply_pointwise_linear(x: &Tensor, p: &PointwiseLinearParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, w, b) = (
        tape.constant(x.clone()),
        tape.constant(p.weight.clone()),
        tape.constant(p.bias.clone()),
    );
    let y = pointwise_linear(&mut tape, xv, w, b)?;
    Ok(tape.value(y).clone())
}

/// Eager per-point layer normalisation.
pub fn apply_layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(p.gamma.clone()),
        tape.constant(p.beta.clone()),
    );
    let y = tape.layer_norm(xv, g, b, p.epsilon)?;
    Ok(tape.value(y).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    crate::tensor::softmax_rows(x)
}

/// How a parameter tensor starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(1 / fan_in)`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
                .collect(),
        )
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Tape handles for a [`Params`] store.
#[derive(Debug, Clone)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }
}

/// Draws every parameter in `plan` from a ChaCha stream seeded by `seed`.
/// Tensors are filled in plan order, so the same plan and seed always give
/// bit-identical parameters.
pub fn init_params(seed: u64, plan: &[ParamSpec]) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for spec in plan {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::FanInUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                let n = spec.shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(spec.shape.clone(), data).expect("plan shape is consistent")
            }
        };
        params.insert(spec.name.clone(), t);
    }
    params
}
