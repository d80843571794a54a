//! Dense layers with exact reverse-mode gradients and a plain SGD optimiser.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `act(W·x + b)` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim], in_dim, out_dim, activation }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        if in_dim + out_dim > 0 {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-limit..limit);
            }
        }
        layer
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| if self.in_dim == 0 { *b } else { b + dot(row, x) })
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients with the same layout as a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl DenseGrads {
    pub fn scale(&mut self, s: f64) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn add(&mut self, other: &DenseGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight).chain(self.bias.iter_mut().zip(&other.bias)) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.iter().all(|&g| g == 0.0))
    }
}

/// Intermediate values of one forward pass, needed by [`DenseNet::backward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Self { layers })
    }

    /// Multi-layer perceptron over `dims` with `hidden` activation between
    /// layers and `output` on the last one.
    pub fn mlp(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            weight: self.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.pre_activation(&x).into_iter().map(|p| layer.activation.apply(p)).collect();
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        check_dim(self.input_dim(), input.len())?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&x);
            let out: Vec<f64> = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            cache.inputs.push(x);
            cache.pre.push(pre);
            x = out.clone();
            cache.outputs.push(out);
        }
        Ok(cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut DenseGrads) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), upstream.len())?;
        let mut g = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[li];
            let out = &cache.outputs[li];
            let input = &cache.inputs[li];
            let delta: Vec<f64> = g
                .iter()
                .zip(pre.iter().zip(out))
                .map(|(gi, (&p, &o))| gi * layer.activation.derivative(p, o))
                .collect();
            let gw = &mut grads.weight[li];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            grads.bias[li].iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
            let mut gin = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                gin.iter_mut().zip(row).for_each(|(gi, w)| *gi += d * w);
            }
            g = gin;
        }
        Ok(g)
    }

    /// Recomputes the forward pass and returns `(param_grads, input_grad)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(DenseGrads, Vec<f64>)> {
        let cache = self.forward_cached(input)?;
        let mut grads = self.zero_grads();
        let gin = self.backward_cached(&cache, upstream, &mut grads)?;
        Ok((grads, gin))
    }

    /// Named parameter tensors in a fixed order: `(name, dims, values)`.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), vec![l.out_dim, l.in_dim], l.weight.as_slice()),
                    (format!("{prefix}.{i}.bias"), vec![l.out_dim], l.bias.as_slice()),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{prefix}.{i}.weight"), &mut l.weight), (format!("{prefix}.{i}.bias"), &mut l.bias)])
            .collect()
    }

    /// Applies one SGD update using gradients laid out like this network.
    pub fn apply_sgd(&mut self, grads: &DenseGrads, sgd: &SgdState, iter: usize, epoch: usize) -> Result<()> {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            sgd.step(&mut layer.weight, &grads.weight[li], iter, epoch)?;
            sgd.step(&mut layer.bias, &grads.bias[li], iter, epoch)?;
        }
        Ok(())
    }
}

/// Plain SGD with weight decay, linear warmup and step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdState {
    fn default() -> Self {
        Self { learning_rate: 0.001, weight_decay: 1e-4, warmup_iters: 100, decay_epochs: vec![4], decay_factor: 0.1 }
    }
}

impl SgdState {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidArgument("decay_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate at global iteration `iter` (0-based) during `epoch` (0-based).
    /// Ramps linearly from 0 over the warmup, then drops by `decay_factor`
    /// once per decay epoch reached.
    pub fn lr(&self, iter: usize, epoch: usize) -> f64 {
        let warm = if iter < self.warmup_iters { iter as f64 / self.warmup_iters as f64 } else { 1.0 };
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * warm * self.decay_factor.powi(decays as i32)
    }

    /// `p ← p − lr·(grad + weight_decay·p)`.
    pub fn step(&self, params: &mut [f64], grads: &[f64], iter: usize, epoch: usize) -> Result<()> {
        check_dim(params.len(), grads.len())?;
        check_finite("gradient", grads)?;
        let lr = self.lr(iter, epoch);
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * (g + self.weight_decay * *p);
        }
        Ok(())
    }
}
