//! Class-conditional Gaussians with a tied covariance and least-likely
//! virtual outlier sampling.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    dim: usize,
    /// `None` for classes without members.
    means: Vec<Option<Vec<f64>>>,
    counts: Vec<usize>,
    tied_cov: Vec<f64>,
    chol: Vec<f64>,
    ridge: f64,
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major. Returns `None` when a pivot is not positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

impl GaussianBank {
    /// Fits per-class means and the tied covariance (divided by the total
    /// count), then factors `Σ + ridge·I`. With `ridge = None` the ridge is
    /// `1e-6 · mean(diag Σ)` floored at `1e-12`.
    pub fn fit(features: &[(Vec<f64>, usize)], k: usize, ridge: Option<f64>) -> Result<Self> {
        let dim = features.first().ok_or(Error::Empty("gaussian features"))?.0.len();
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, label) in features {
            check_dim(dim, v.len())?;
            if *label >= k {
                return Err(Error::LabelOutOfRange { label: *label, k });
            }
            counts[*label] += 1;
            sums[*label].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        let means: Vec<Option<Vec<f64>>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        let mut cov = vec![0.0; dim * dim];
        let mut dev = vec![0.0; dim];
        for (v, label) in features {
            let mu = means[*label].as_ref().expect("class has members");
            dev.iter_mut().zip(v.iter().zip(mu)).for_each(|(d, (x, m))| *d = x - m);
            for i in 0..dim {
                for j in 0..=i {
                    cov[i * dim + j] += dev[i] * dev[j];
                }
            }
        }
        let n = features.len() as f64;
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] /= n;
                cov[j * dim + i] = cov[i * dim + j];
            }
        }
        let mean_diag = (0..dim).map(|i| cov[i * dim + i]).sum::<f64>() / dim.max(1) as f64;
        let mut ridge = ridge.unwrap_or_else(|| (1e-6 * mean_diag).max(1e-12));
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be non-negative".into()));
        }
        let chol = loop {
            let mut reg = cov.clone();
            (0..dim).for_each(|i| reg[i * dim + i] += ridge);
            if let Some(l) = cholesky(&reg, dim) {
                break l;
            }
            // numerically indefinite; grow the ridge
            ridge = if ridge > 0.0 { ridge * 10.0 } else { (1e-6 * mean_diag).max(1e-12) };
            if !ridge.is_finite() {
                return Err(Error::NonFinite("covariance".into()));
            }
        };
        Ok(Self { dim, means, counts, tied_cov: cov, chol, ridge })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn tied_cov(&self) -> &[f64] {
        &self.tied_cov
    }

    pub fn chol(&self) -> &[f64] {
        &self.chol
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.means.get(k).is_some_and(Option::is_some)
    }

    pub fn mean(&self, k: usize) -> Result<&[f64]> {
        self.means.get(k).and_then(Option::as_deref).ok_or(Error::InactiveClass(k))
    }

    /// Log-density of `N(μ_k, Σ + ridge·I)` at `v`.
    pub fn log_density(&self, k: usize, v: &[f64]) -> Result<f64> {
        let mu = self.mean(k)?;
        check_dim(self.dim, v.len())?;
        let diff: Vec<f64> = v.iter().zip(mu).map(|(x, m)| x - m).collect();
        let y = forward_solve(&self.chol, self.dim, &diff);
        let maha: f64 = y.iter().map(|t| t * t).sum();
        let log_det: f64 = (0..self.dim).map(|i| self.chol[i * self.dim + i].ln()).sum();
        Ok(-0.5 * maha - log_det - 0.5 * self.dim as f64 * (2.0 * PI).ln())
    }

    /// Draws `n_samples` from class `k` and returns the `n_outliers` least
    /// likely ones, least likely first.
    ///
    /// A draw `μ + L·ε` has Mahalanobis distance `‖ε‖`, so ranking by `‖ε‖`
    /// is ranking by density and only the selected draws are transformed.
    pub fn sample_virtual_outliers(&self, k: usize, n_samples: usize, n_outliers: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mu = self.mean(k)?;
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        if n_outliers > n_samples {
            return Err(Error::InvalidArgument("n_outliers exceeds n_samples".into()));
        }
        let d = self.dim;
        let mut rng = seeded(seed);
        let eps: Vec<f64> = (0..n_samples * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let selected = least_likely(&eps, d, n_outliers);
        Ok(selected
            .into_iter()
            .map(|i| {
                let e = &eps[i * d..(i + 1) * d];
                (0..d)
                    .map(|r| mu[r] + (0..=r).map(|c| self.chol[r * d + c] * e[c]).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.is_active(k)).collect()
    }

    /// Raw storage for checkpointing: means (zeros for inactive), counts.
    pub fn means_flat(&self) -> Vec<f64> {
        self.means.iter().flat_map(|m| m.clone().unwrap_or_else(|| vec![0.0; self.dim])).collect()
    }

    pub fn from_parts(dim: usize, means_flat: &[f64], counts: &[usize], tied_cov: Vec<f64>, ridge: f64) -> Result<Self> {
        let k = counts.len();
        check_dim(k * dim, means_flat.len())?;
        check_dim(dim * dim, tied_cov.len())?;
        let means = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| (n > 0).then(|| means_flat[i * dim..(i + 1) * dim].to_vec()))
            .collect();
        let mut reg = tied_cov.clone();
        (0..dim).for_each(|i| reg[i * dim + i] += ridge);
        let chol = cholesky(&reg, dim).ok_or_else(|| Error::Format("stored covariance is not positive definite".into()))?;
        Ok(Self { dim, means, counts: counts.to_vec(), tied_cov, chol, ridge })
    }
}

/// Indices of the `n` rows of `eps` with the largest squared norm, largest
/// first, ties by lowest index.
pub(crate) fn least_likely(eps: &[f64], d: usize, n: usize) -> Vec<usize> {
    let norms: Vec<f64> = eps.chunks_exact(d.max(1)).map(|e| e.iter().map(|x| x * x).sum()).collect();
    let order = |a: &usize, b: &usize| norms[*b].total_cmp(&norms[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    if n == 0 {
        return Vec::new();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, order);
        idx.truncate(n);
    }
    idx.sort_by(order);
    idx
}

pub fn fit_gaussians(features: &[(Vec<f64>, usize)], k: usize) -> Result<GaussianBank> {
    GaussianBank::fit(features, k, None)
}

/// Per-class FIFO buffers of embedded features used to refit the Gaussians
/// every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    buffers: Vec<VecDeque<Vec<f64>>>,
    capacity: usize,
    min_fill: usize,
}

impl FeatureQueue {
    pub fn new(k: usize, capacity: usize, min_fill: usize) -> Result<Self> {
        if k == 0 || capacity == 0 || min_fill > capacity {
            return Err(Error::InvalidArgument("queue needs k ≥ 1 and min_fill ≤ capacity".into()));
        }
        Ok(Self { buffers: vec![VecDeque::with_capacity(capacity); k], capacity, min_fill })
    }

    pub fn push(&mut self, label: usize, v: Vec<f64>) -> Result<()> {
        let k = self.buffers.len();
        let buf = self.buffers.get_mut(label).ok_or(Error::LabelOutOfRange { label, k })?;
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(v);
        Ok(())
    }

    pub fn len(&self, label: usize) -> usize {
        self.buffers.get(label).map_or(0, VecDeque::len)
    }

    pub fn is_ready(&self, label: usize) -> bool {
        self.len(label) >= self.min_fill
    }

    pub fn clear(&mut self) {
        self.buffers.iter_mut().for_each(VecDeque::clear);
    }

    /// Fits a bank over the ready classes only; classes below `min_fill`
    /// come out inactive. `None` when no class is ready.
    pub fn fit(&self) -> Result<Option<GaussianBank>> {
        let feats: Vec<(Vec<f64>, usize)> = self
            .buffers
            .iter()
            .enumerate()
            .filter(|(k, _)| self.is_ready(*k))
            .flat_map(|(k, b)| b.iter().map(move |v| (v.clone(), k)))
            .collect();
        if feats.is_empty() {
            return Ok(None);
        }
        GaussianBank::fit(&feats, self.buffers.len(), None).map(Some)
    }
}
