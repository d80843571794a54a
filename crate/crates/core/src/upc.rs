//! Unsupervised pseudo-classification.
//!
//! Ground-truth object features are clustered before every epoch with
//! Sculley's mini-batch k-means, warm-started from the previous epoch's
//! centres. The resulting nearest-centre labels supervise a pseudo-class
//! classifier trained with softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{derive, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub batch_size: usize,
    /// Passes over the data.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { k: 5, batch_size: 256, iterations: 10, seed: 0 }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument("k-means k, batch_size and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Cluster centres plus the label of every clustered object (indexed by
/// position in the feature list).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelState {
    pub centres: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub epoch: usize,
}

impl PseudoLabelState {
    pub fn k(&self) -> usize {
        self.centres.len()
    }

    /// `object_id,label` CSV.
    pub fn to_csv(&self, object_ids: &[u64]) -> Result<String> {
        check_dim(self.assignments.len(), object_ids.len())?;
        let mut out = String::from("object_id,label\n");
        for (id, label) in object_ids.iter().zip(&self.assignments) {
            out.push_str(&format!("{id},{label}\n"));
        }
        Ok(out)
    }
}

/// `k` i.i.d. standard-normal vectors of length `dim`.
pub fn init_centres(k: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..k).map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(z: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centres.iter().enumerate() {
        let d = sq_dist(z, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index of the nearest centre under Euclidean distance, lowest index on ties.
pub fn assign_pseudo_label(z: &[f64], centres: &[Vec<f64>]) -> Result<usize> {
    let first = centres.first().ok_or(Error::Empty("cluster centres"))?;
    check_dim(first.len(), z.len())?;
    Ok(nearest(z, centres).0)
}

fn assign_all(features: &[Vec<f64>], centres: &[Vec<f64>]) -> Vec<(usize, f64)> {
    features.par_iter().map(|z| nearest(z, centres)).collect()
}

/// Sum of squared distances from each point to its assigned centre.
pub fn inertia(features: &[Vec<f64>], centres: &[Vec<f64>], assignments: &[usize]) -> f64 {
    features.iter().zip(assignments).map(|(z, &a)| sq_dist(z, &centres[a])).sum()
}

fn minibatch_passes(
    features: &[Vec<f64>],
    centres: &mut [Vec<f64>],
    counts: &mut [u64],
    cfg: &KmeansConfig,
    rng: &mut crate::rng::Rng,
) {
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..cfg.iterations {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| nearest(&features[i], centres).0).collect();
            for (&i, &c) in batch.iter().zip(&labels) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (w, x) in centres[c].iter_mut().zip(&features[i]) {
                    *w = (1.0 - eta) * *w + eta * x;
                }
            }
        }
    }
}

/// Sculley mini-batch k-means.
///
/// After the mini-batch passes, empty clusters are re-seeded one at a time to
/// the point farthest from its current centre and the passes rerun (at most
/// `k` rounds). Non-empty centres are then refit to the mean of their members
/// and the labels come from one final full nearest-centre pass, so they are
/// always consistent with the returned centres.
pub fn minibatch_kmeans(
    features: &[Vec<f64>],
    cfg: &KmeansConfig,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<PseudoLabelState> {
    cfg.validate()?;
    let dim = features.first().ok_or(Error::Empty("k-means features"))?.len();
    for f in features {
        check_dim(dim, f.len())?;
    }
    let mut centres = match warm_start {
        Some(w) => {
            check_dim(cfg.k, w.len())?;
            for c in w {
                check_dim(dim, c.len())?;
            }
            w.to_vec()
        }
        None => init_centres(cfg.k, dim, cfg.seed),
    };
    let mut rng = seeded(derive(cfg.seed, 0x6b6d));
    let mut counts = vec![0u64; cfg.k];
    minibatch_passes(features, &mut centres, &mut counts, cfg, &mut rng);

    for _ in 0..cfg.k {
        let assigned = assign_all(features, &centres);
        let mut sizes = vec![0usize; cfg.k];
        for (a, _) in &assigned {
            sizes[*a] += 1;
        }
        let empty: Vec<usize> = (0..cfg.k).filter(|&c| sizes[c] == 0).collect();
        if empty.is_empty() {
            break;
        }
        let mut dists: Vec<f64> = assigned.iter().map(|(_, d)| *d).collect();
        let mut reseeded = false;
        for c in empty {
            let (far, d) = dists
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if d <= 0.0 {
                break;
            }
            centres[c] = features[far].clone();
            counts[c] = 0;
            reseeded = true;
            for (i, z) in features.iter().enumerate() {
                dists[i] = dists[i].min(sq_dist(z, &centres[c]));
            }
        }
        if !reseeded {
            break;
        }
        minibatch_passes(features, &mut centres, &mut counts, cfg, &mut rng);
    }

    let assigned = assign_all(features, &centres);
    let mut sums = vec![vec![0.0; dim]; cfg.k];
    let mut sizes = vec![0usize; cfg.k];
    for (z, (a, _)) in features.iter().zip(&assigned) {
        sizes[*a] += 1;
        sums[*a].iter_mut().zip(z).for_each(|(s, x)| *s += x);
    }
    for c in 0..cfg.k {
        if sizes[c] > 0 {
            let n = sizes[c] as f64;
            centres[c] = sums[c].iter().map(|s| s / n).collect();
        }
    }
    let assignments = assign_all(features, &centres).into_iter().map(|(a, _)| a).collect();
    Ok(PseudoLabelState { centres, assignments, epoch: 0 })
}

/// Per-dimension standardisation applied before clustering when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let dim = features.first().ok_or(Error::Empty("standardizer features"))?.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            check_dim(dim, f.len())?;
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for f in features {
            var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.scale)).map(|(x, (m, s))| (x - m) / s).collect()
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn pcls_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, k: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (max + sum.ln() - logits[label]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
