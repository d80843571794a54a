//! Weighted free energy over pseudo-class logits, the uncertainty MLP and the
//! normal-vs-outlier binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{sigmoid, Activation, DenseGrads, DenseNet, ForwardCache};
use crate::rng::Rng;

/// Uncertainty scores are kept strictly inside (0, 1).
pub const LAMBDA_EPS: f64 = 1e-15;

/// One learnable weight per pseudo-class, initialised to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub w: Vec<f64>,
}

impl EnergyWeights {
    pub fn ones(k: usize) -> Self {
        Self { w: vec![1.0; k] }
    }
}

/// `E = −log Σ_k exp(f_k·w_k)`.
pub fn energy(logits: &[f64], weights: &EnergyWeights) -> Result<f64> {
    energy_with_grad(logits, weights).map(|(e, _, _)| e)
}

/// Energy plus `∂E/∂f` and `∂E/∂w`.
pub fn energy_with_grad(logits: &[f64], weights: &EnergyWeights) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim(weights.w.len(), logits.len())?;
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let z: Vec<f64> = logits.iter().zip(&weights.w).map(|(f, w)| f * w).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let e = -(max + sum.ln());
    let p: Vec<f64> = exps.iter().map(|x| x / sum).collect();
    let gf = p.iter().zip(&weights.w).map(|(pk, wk)| -pk * wk).collect();
    let gw = p.iter().zip(logits).map(|(pk, fk)| -pk * fk).collect();
    Ok((e, gf, gw))
}

/// `λ = sigmoid(φ(E))` with `φ` a scalar-to-scalar MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyHead {
    /// Produces the pre-sigmoid logit.
    pub net: DenseNet,
}

impl UncertaintyHead {
    pub fn new(hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self { net: DenseNet::mlp(&[1, hidden, 1], Activation::Relu, Activation::Identity, rng)? })
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        use crate::nn::Dense;
        Ok(Self {
            net: DenseNet::from_layers(vec![
                Dense::zeros(1, hidden, Activation::Relu),
                Dense::zeros(hidden, 1, Activation::Identity),
            ])?,
        })
    }

    pub fn logit(&self, e: f64) -> Result<f64> {
        Ok(self.net.forward(&[e])?[0])
    }

    pub fn uncertainty(&self, e: f64) -> Result<f64> {
        Ok(lambda_from_logit(self.logit(e)?))
    }
}

pub fn lambda_from_logit(a: f64) -> f64 {
    sigmoid(a).clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS)
}

pub fn uncertainty(head: &UncertaintyHead, e: f64) -> Result<f64> {
    if !e.is_finite() {
        return Err(Error::NonFinite("energy".into()));
    }
    head.uncertainty(e)
}

/// Binary cross-entropy with normals labelled 1 and outliers 0. Returns the
/// loss and its gradients with respect to each λ.
pub fn anomaly_loss(normal: &[f64], outlier: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = normal.len() + outlier.len();
    if n == 0 {
        return Err(Error::Empty("anomaly loss inputs"));
    }
    if normal.iter().chain(outlier).any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::InvalidArgument("uncertainty scores must lie strictly inside (0, 1)".into()));
    }
    let nf = n as f64;
    let loss = -(normal.iter().map(|l| l.ln()).sum::<f64>() + outlier.iter().map(|l| (1.0 - l).ln()).sum::<f64>()) / nf;
    let gn = normal.iter().map(|l| -1.0 / (l * nf)).collect();
    let go = outlier.iter().map(|l| 1.0 / ((1.0 - l) * nf)).collect();
    Ok((loss, gn, go))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// [`anomaly_loss`] evaluated from pre-sigmoid logits, stable for any logit.
pub fn anomaly_loss_logits(normal: &[f64], outlier: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = normal.len() + outlier.len();
    if n == 0 {
        return Err(Error::Empty("anomaly loss inputs"));
    }
    let nf = n as f64;
    let loss = (normal.iter().map(|&a| softplus(-a)).sum::<f64>() + outlier.iter().map(|&a| softplus(a)).sum::<f64>()) / nf;
    let gn = normal.iter().map(|&a| (sigmoid(a) - 1.0) / nf).collect();
    let go = outlier.iter().map(|&a| sigmoid(a) / nf).collect();
    Ok((loss, gn, go))
}

/// Energy weights and uncertainty MLP as one trainable unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyHead {
    pub weights: EnergyWeights,
    pub phi: UncertaintyHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyGrads {
    pub weights: Vec<f64>,
    pub phi: DenseGrads,
}

impl AnomalyGrads {
    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&g| g == 0.0) && self.phi.is_zero()
    }
}

/// Values kept from [`AnomalyHead::forward`] for the backward pass.
pub struct AnomalyForward {
    pub energy: f64,
    pub logit: f64,
    pub lambda: f64,
    grad_f: Vec<f64>,
    grad_w: Vec<f64>,
    cache: ForwardCache,
}

impl AnomalyHead {
    pub fn new(k: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self { weights: EnergyWeights::ones(k), phi: UncertaintyHead::new(hidden, rng)? })
    }

    pub fn zero_grads(&self) -> AnomalyGrads {
        AnomalyGrads { weights: vec![0.0; self.weights.w.len()], phi: self.phi.net.zero_grads() }
    }

    pub fn forward(&self, logits: &[f64]) -> Result<AnomalyForward> {
        let (energy, grad_f, grad_w) = energy_with_grad(logits, &self.weights)?;
        let cache = self.phi.net.forward_cached(&[energy])?;
        let logit = cache.output()[0];
        Ok(AnomalyForward { energy, logit, lambda: lambda_from_logit(logit), grad_f, grad_w, cache })
    }

    /// Backpropagates `∂L/∂logit` and returns `∂L/∂f`.
    pub fn backward(&self, fwd: &AnomalyForward, grad_logit: f64, grads: &mut AnomalyGrads) -> Result<Vec<f64>> {
        let g_e = self.phi.net.backward_cached(&fwd.cache, &[grad_logit], &mut grads.phi)?[0];
        grads.weights.iter_mut().zip(&fwd.grad_w).for_each(|(g, d)| *g += g_e * d);
        Ok(fwd.grad_f.iter().map(|d| g_e * d).collect())
    }
}
