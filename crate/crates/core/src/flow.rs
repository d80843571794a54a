//! Affine-coupling normalizing flow used for latent-space outlier synthesis.
//!
//! Each coupling layer keeps the masked half of the input fixed and applies
//! `y_b = x_b · exp(s(x_a)) + t(x_a)` to the other half, with
//! `s = bound · tanh(scale_net(x_a))`. Masks alternate between the first and
//! second half of the dimensions.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::gauss::least_likely;
use crate::nn::{Activation, DenseGrads, DenseNet, ForwardCache, SgdState};
use crate::rng::{seeded, Rng};

pub const DEFAULT_SCALE_BOUND: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` for dimensions passed through unchanged (the conditioning half).
    pub mask: Vec<bool>,
    pub scale_net: DenseNet,
    pub shift_net: DenseNet,
}

impl CouplingLayer {
    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (v, &m) in x.iter().zip(&self.mask) {
            if m {
                a.push(*v);
            } else {
                b.push(*v);
            }
        }
        (a, b)
    }

    fn merge(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (mut ia, mut ib) = (a.iter(), b.iter());
        self.mask
            .iter()
            .map(|&m| if m { *ia.next().expect("mask size") } else { *ib.next().expect("mask size") })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    dim: usize,
    pub layers: Vec<CouplingLayer>,
    pub scale_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub scale: Vec<DenseGrads>,
    pub shift: Vec<DenseGrads>,
}

impl FlowGrads {
    pub fn scale_by(&mut self, s: f64) {
        self.scale.iter_mut().chain(self.shift.iter_mut()).for_each(|g| g.scale(s));
    }

    pub fn add(&mut self, other: &FlowGrads) {
        for (a, b) in self.scale.iter_mut().zip(&other.scale).chain(self.shift.iter_mut().zip(&other.shift)) {
            a.add(b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.scale.iter().chain(&self.shift).all(DenseGrads::is_zero)
    }
}

struct LayerCache {
    x_b: Vec<f64>,
    s: Vec<f64>,
    tanh: Vec<f64>,
    scale_cache: ForwardCache,
    shift_cache: ForwardCache,
}

fn half_mask(dim: usize, layer: usize) -> Vec<bool> {
    let half = dim / 2;
    (0..dim).map(|j| (j < half) != (layer % 2 == 1)).collect()
}

fn std_normal_nll(xi: &[f64]) -> f64 {
    0.5 * xi.iter().map(|x| x * x).sum::<f64>() + 0.5 * xi.len() as f64 * (2.0 * PI).ln()
}

impl CouplingFlow {
    /// `n_layers` coupling blocks whose scale/shift nets have one hidden relu
    /// layer of `hidden` units. Output layers start at zero, so the new flow
    /// is the identity map.
    pub fn new(dim: usize, n_layers: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || n_layers == 0 {
            return Err(Error::InvalidArgument("flow needs dim ≥ 1 and at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|i| {
                let mask = half_mask(dim, i);
                let na = mask.iter().filter(|&&m| m).count();
                let nb = dim - na;
                let mut scale_net = DenseNet::mlp(&[na, hidden, nb], Activation::Relu, Activation::Identity, rng)?;
                let mut shift_net = DenseNet::mlp(&[na, hidden, nb], Activation::Relu, Activation::Identity, rng)?;
                scale_net.zero_output_layer();
                shift_net.zero_output_layer();
                Ok(CouplingLayer { mask, scale_net, shift_net })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, layers, scale_bound: DEFAULT_SCALE_BOUND })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zero_grads(&self) -> FlowGrads {
        FlowGrads {
            scale: self.layers.iter().map(|l| l.scale_net.zero_grads()).collect(),
            shift: self.layers.iter().map(|l| l.shift_net.zero_grads()).collect(),
        }
    }

    fn forward_cached(&self, v: &[f64]) -> Result<(Vec<f64>, f64, Vec<LayerCache>)> {
        check_dim(self.dim, v.len())?;
        check_finite("flow input", v)?;
        let mut x = v.to_vec();
        let mut log_det = 0.0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, b) = layer.split(&x);
            let scale_cache = layer.scale_net.forward_cached(&a)?;
            let shift_cache = layer.shift_net.forward_cached(&a)?;
            let tanh: Vec<f64> = scale_cache.output().iter().map(|r| r.tanh()).collect();
            let s: Vec<f64> = tanh.iter().map(|t| self.scale_bound * t).collect();
            let y_b: Vec<f64> = b
                .iter()
                .zip(s.iter().zip(shift_cache.output()))
                .map(|(xb, (si, ti))| xb * si.exp() + ti)
                .collect();
            log_det += s.iter().sum::<f64>();
            x = layer.merge(&a, &y_b);
            caches.push(LayerCache { x_b: b, s, tanh, scale_cache, shift_cache });
        }
        Ok((x, log_det, caches))
    }

    /// `ξ = f(v)` and `log|det ∂f/∂v|`.
    pub fn forward(&self, v: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (xi, ld, _) = self.forward_cached(v)?;
        Ok((xi, ld))
    }

    pub fn inverse(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, xi.len())?;
        check_finite("flow latent", xi)?;
        let mut y = xi.to_vec();
        for layer in self.layers.iter().rev() {
            let (a, y_b) = layer.split(&y);
            let raw = layer.scale_net.forward(&a)?;
            let t = layer.shift_net.forward(&a)?;
            let x_b: Vec<f64> = y_b
                .iter()
                .zip(raw.iter().zip(&t))
                .map(|(yb, (r, ti))| (yb - ti) * (-self.scale_bound * r.tanh()).exp())
                .collect();
            y = layer.merge(&a, &x_b);
        }
        Ok(y)
    }

    /// Gradients of a loss `L(ξ, log_det)` given `∂L/∂ξ` and `∂L/∂log_det`.
    /// Returns parameter gradients and `∂L/∂v`.
    pub fn backward(&self, v: &[f64], grad_xi: &[f64], grad_log_det: f64) -> Result<(FlowGrads, Vec<f64>)> {
        check_dim(self.dim, grad_xi.len())?;
        let (_, _, caches) = self.forward_cached(v)?;
        let mut grads = self.zero_grads();
        let mut g = grad_xi.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &caches[li];
            let (g_a, g_yb) = layer.split(&g);
            let mut g_xb = Vec::with_capacity(g_yb.len());
            let mut g_raw = Vec::with_capacity(g_yb.len());
            for i in 0..g_yb.len() {
                let es = c.s[i].exp();
                g_xb.push(g_yb[i] * es);
                let g_s = g_yb[i] * c.x_b[i] * es + grad_log_det;
                g_raw.push(g_s * self.scale_bound * (1.0 - c.tanh[i] * c.tanh[i]));
            }
            let ga_scale = layer.scale_net.backward_cached(&c.scale_cache, &g_raw, &mut grads.scale[li])?;
            let ga_shift = layer.shift_net.backward_cached(&c.shift_cache, &g_yb, &mut grads.shift[li])?;
            let g_a: Vec<f64> = g_a.iter().zip(ga_scale.iter().zip(&ga_shift)).map(|(x, (y, z))| x + y + z).collect();
            g = layer.merge(&g_a, &g_xb);
        }
        Ok((grads, g))
    }

    /// `−log p_θ(v)` with a standard-normal base density.
    pub fn nll(&self, v: &[f64]) -> Result<f64> {
        let (xi, ld) = self.forward(v)?;
        Ok(std_normal_nll(&xi) - ld)
    }

    /// Mean negative log-likelihood over `batch` and its parameter gradients.
    pub fn nll_loss(&self, batch: &[Vec<f64>]) -> Result<(f64, FlowGrads)> {
        if batch.is_empty() {
            return Err(Error::Empty("flow batch"));
        }
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for v in batch {
            let (xi, ld) = self.forward(v)?;
            total += std_normal_nll(&xi) - ld;
            let (g, _) = self.backward(v, &xi, -1.0)?;
            grads.add(&g);
        }
        let n = batch.len() as f64;
        grads.scale_by(1.0 / n);
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("flow nll".into()));
        }
        Ok((loss, grads))
    }

    /// Samples latent draws and maps the `n_outliers` largest-norm ones back
    /// through the inverse flow.
    pub fn sample_outliers(&self, n_samples: usize, n_outliers: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        if n_outliers > n_samples {
            return Err(Error::InvalidArgument("n_outliers exceeds n_samples".into()));
        }
        let d = self.dim;
        let mut rng = seeded(seed);
        let latents: Vec<f64> = (0..n_samples * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        least_likely(&latents, d, n_outliers)
            .into_iter()
            .map(|i| self.inverse(&latents[i * d..(i + 1) * d]))
            .collect()
    }

    pub fn apply_sgd(&mut self, grads: &FlowGrads, sgd: &SgdState, iter: usize, epoch: usize) -> Result<()> {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            layer.scale_net.apply_sgd(&grads.scale[li], sgd, iter, epoch)?;
            layer.shift_net.apply_sgd(&grads.shift[li], sgd, iter, epoch)?;
        }
        Ok(())
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let mut t = l.scale_net.tensors(&format!("{prefix}.{i}.scale"));
                t.extend(l.shift_net.tensors(&format!("{prefix}.{i}.shift")));
                t
            })
            .collect()
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let mut t = l.scale_net.tensors_mut(&format!("{prefix}.{i}.scale"));
                t.extend(l.shift_net.tensors_mut(&format!("{prefix}.{i}.shift")));
                t
            })
            .collect()
    }
}

pub fn flow_forward(flow: &CouplingFlow, v: &[f64]) -> Result<(Vec<f64>, f64)> {
    flow.forward(v)
}

pub fn flow_inverse(flow: &CouplingFlow, xi: &[f64]) -> Result<Vec<f64>> {
    flow.inverse(xi)
}

pub fn nll_loss(flow: &CouplingFlow, batch: &[Vec<f64>]) -> Result<(f64, FlowGrads)> {
    flow.nll_loss(batch)
}

pub fn sample_flow_outliers(flow: &CouplingFlow, n_samples: usize, n_outliers: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    flow.sample_outliers(n_samples, n_outliers, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_flow_is_identity() {
        let flow = CouplingFlow::new(5, 4, 8, &mut seeded(0)).unwrap();
        let v = vec![0.3, -1.0, 2.0, 0.0, 7.5];
        let (xi, ld) = flow.forward(&v).unwrap();
        assert_eq!(xi, v);
        assert_eq!(ld, 0.0);
        assert_eq!(flow.inverse(&v).unwrap(), v);
    }

    #[test]
    fn single_scaled_dimension() {
        let mut flow = CouplingFlow::new(2, 1, 4, &mut seeded(0)).unwrap();
        let raw: f64 = 0.4;
        flow.layers[0].scale_net.layers[1].bias[0] = raw;
        let s = DEFAULT_SCALE_BOUND * raw.tanh();
        let (xi, ld) = flow.forward(&[1.5, 2.0]).unwrap();
        assert!((ld - s).abs() < 1e-15);
        assert_eq!(xi[0], 1.5);
        assert!((xi[1] - 2.0 * s.exp()).abs() < 1e-12);
    }

    #[test]
    fn identity_nll() {
        let flow = CouplingFlow::new(1, 2, 4, &mut seeded(0)).unwrap();
        let (loss, _) = flow.nll_loss(&[vec![0.0]]).unwrap();
        assert!((loss - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(flow.nll_loss(&[]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let flow = CouplingFlow::new(2, 2, 4, &mut seeded(0)).unwrap();
        assert!(flow.forward(&[f64::NAN, 0.0]).is_err());
        assert!(flow.inverse(&[0.0, f64::INFINITY]).is_err());
        assert!(flow.forward(&[0.0]).is_err());
    }

    #[test]
    fn identity_sampling_returns_largest_latents() {
        let flow = CouplingFlow::new(3, 2, 4, &mut seeded(0)).unwrap();
        let all = flow.sample_outliers(20, 20, 4).unwrap();
        assert_eq!(all.len(), 20);
        let norms: Vec<f64> = all.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
        assert!(norms.windows(2).all(|w| w[0] >= w[1]));
        let top = flow.sample_outliers(20, 3, 4).unwrap();
        assert_eq!(top, all[..3].to_vec());
        assert!(flow.sample_outliers(0, 0, 1).is_err());
        assert!(flow.sample_outliers(2, 3, 1).is_err());
    }
}
