//! Fully connected layers, Xavier initialization, and Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::Array;
use crate::autodiff::{AutodiffError, ExprGraph, NodeId};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected a rank-2 shape, got {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    Width {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{layers} layers but {activations} activations")]
    ActivationCount { layers: usize, activations: usize },
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    GradShape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("non-finite gradient for parameter {0}; step skipped")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Uniform Xavier/Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
///
/// For a `rows×cols` weight, `fan_out = rows` and `fan_in = cols`.
pub fn init_xavier<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Array, NnError> {
    let [rows, cols] = *shape else {
        return Err(NnError::NotMatrix(shape.to_vec()));
    };
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok(Array::matrix(rows, cols, data).expect("element count matches"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut ExprGraph, x: NodeId) -> Result<NodeId, AutodiffError> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }

    pub fn apply_scalar(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }
}

/// `y = x Wᵀ + b` with `W: k_out×k_in` and `b: 1×k_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Array,
    pub bias: Array,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(k_in: usize, k_out: usize, rng: &mut R) -> Self {
        Self {
            weight: init_xavier(&[k_out, k_in], rng).expect("rank-2"),
            bias: Array::zeros(&[1, k_out]),
        }
    }

    pub fn k_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn k_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activations: Vec<Activation>,
}

/// An [`Mlp`] whose parameters have been placed into a graph as inputs.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    /// `(weight, bias)` per layer.
    pub params: Vec<(NodeId, NodeId)>,
    pub activations: Vec<Activation>,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut ExprGraph, x: NodeId) -> Result<NodeId, NnError> {
        let mut h = x;
        for (layer, (&(w, b), act)) in self.params.iter().zip(&self.activations).enumerate() {
            let (_, k_in) = g.shape(w);
            let (rows, width) = g.shape(h);
            if width != k_in {
                return Err(NnError::Width {
                    layer,
                    expected: k_in,
                    actual: width,
                });
            }
            let wt = g.transpose(w)?;
            let z = g.matmul(h, wt)?;
            let (_, k_out) = g.shape(z);
            let bb = g.broadcast(b, rows, k_out)?;
            let z = g.add(z, bb)?;
            h = act.apply(g, z)?;
        }
        Ok(h)
    }

    /// Parameter node ids in the same order as [`Mlp::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Mlp {
    /// Builds a network with the given layer widths, e.g. `[in, hidden, out]`
    /// is two linear layers. Every layer but the last uses `hidden_act`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::new(w[0], w[1], rng))
            .collect();
        let activations = (0..n)
            .map(|i| if i + 1 == n { output_act } else { hidden_act })
            .collect();
        Self {
            layers,
            activations,
        }
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activations: Vec<Activation>) -> Result<Self, NnError> {
        if layers.len() != activations.len() {
            return Err(NnError::ActivationCount {
                layers: layers.len(),
                activations: activations.len(),
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].k_out() != pair[1].k_in() {
                return Err(NnError::Width {
                    layer: i + 1,
                    expected: pair[1].k_in(),
                    actual: pair[0].k_out(),
                });
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn k_in(&self) -> usize {
        self.layers[0].k_in()
    }

    pub fn k_out(&self) -> usize {
        self.layers.last().expect("non-empty").k_out()
    }

    pub fn bind(&self, g: &mut ExprGraph) -> Result<BoundMlp, NnError> {
        let mut params = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = g.constant(l.weight.clone())?;
            let b = g.constant(l.bias.clone())?;
            params.push((w, b));
        }
        Ok(BoundMlp {
            params,
            activations: self.activations.clone(),
        })
    }

    /// Weights and biases interleaved: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Differentiable forward pass of a `batch×k_in` input.
    pub fn forward(&self, g: &mut ExprGraph, x: NodeId) -> Result<(BoundMlp, NodeId), NnError> {
        let bound = self.bind(g)?;
        let y = bound.forward(g, x)?;
        Ok((bound, y))
    }

    /// Forward pass on plain arrays.
    pub fn mlp_forward(&self, input: &Array) -> Result<Array, NnError> {
        let (_, width) = input
            .dims()
            .map_err(|_| NnError::NotMatrix(input.shape().to_vec()))?;
        if width != self.k_in() {
            return Err(NnError::Width {
                layer: 0,
                expected: self.k_in(),
                actual: width,
            });
        }
        let mut g = ExprGraph::new();
        let x = g.constant(input.clone())?;
        let (_, y) = self.forward(&mut g, x)?;
        Ok(g.eval_array(y)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// WGAN-GP momentum settings. The step size is larger than the usual
    /// 1e-4 so that desk-scale runs converge in a few epochs.
    pub fn gan() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn gcn() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Array]) -> Self {
        let zeros = |p: &&Array| Array::zeros(p.shape());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update. On a shape mismatch or non-finite
    /// gradient nothing is changed and an error is returned.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::GradShape {
                index: params.len().min(grads.len()),
                param: vec![params.len()],
                grad: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(NnError::GradShape {
                    index: i,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(i));
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Shuffled minibatch index lists covering `0..n`; the last batch may be short.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
