//! Synthetic feature scenes: noisy maps with rectangular object regions
//! whose channels carry a per-cluster mean pattern.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box, FeatureMap};
use crate::rng::{derive, seeded, Rng};
use crate::scene::{Candidate, GtBox, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    /// Training scenes.
    pub n_scenes: usize,
    pub n_test_in: usize,
    pub n_test_ood: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub channels: usize,
    pub n_clusters_in: usize,
    pub n_clusters_ood: usize,
    pub cluster_sep: f64,
    pub noise_sd: f64,
    /// Inclusive range of objects per scene.
    pub boxes_per_scene: (usize, usize),
    /// Inclusive range of box side lengths, in map cells.
    pub box_size: (usize, usize),
    /// Candidate jitter as a fraction of box size.
    pub jitter: f64,
    pub candidates_per_box: usize,
    /// Pixels per map cell, used for size-binned recall.
    pub stride: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_test_in: 50,
            n_test_ood: 50,
            map_h: 32,
            map_w: 32,
            channels: 16,
            n_clusters_in: 5,
            n_clusters_ood: 1,
            cluster_sep: 4.0,
            noise_sd: 0.5,
            boxes_per_scene: (2, 4),
            box_size: (2, 8),
            jitter: 0.1,
            candidates_per_box: 2,
            stride: 16.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Scene>,
    pub test_in: Vec<Scene>,
    pub test_ood: Vec<Scene>,
    /// In-distribution means first, then held-out ones.
    pub cluster_means: Vec<Vec<f64>>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.map_h == 0 || self.map_w == 0 || self.channels == 0 {
            return bad("map dimensions must be positive");
        }
        if !(self.cluster_sep > 0.0 && self.cluster_sep.is_finite()) || !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("cluster_sep must be positive and noise_sd non-negative");
        }
        if self.n_clusters_in == 0 {
            return bad("need at least one in-distribution cluster");
        }
        if self.n_clusters_in + self.n_clusters_ood.saturating_sub(1) > self.channels {
            return bad("too many clusters for the channel count");
        }
        if self.n_test_ood > 0 && self.n_clusters_ood == 0 {
            return bad("out-of-distribution scenes need a held-out cluster");
        }
        let (lo, hi) = self.boxes_per_scene;
        let (smin, smax) = self.box_size;
        if lo == 0 || lo > hi || smin == 0 || smin > smax {
            return bad("box count and size ranges must be non-empty and positive");
        }
        if smax + 1 > self.map_h.min(self.map_w) {
            return bad("boxes cannot fit the map");
        }
        if !(0.0..0.5).contains(&self.jitter) || !(self.stride > 0.0) {
            return bad("jitter must lie in [0, 0.5) and stride must be positive");
        }
        Ok(())
    }

    /// In-distribution means sit on scaled axes so each lies `cluster_sep`
    /// from their centroid's pattern; the first held-out mean is that
    /// centroid and further ones step off along unused axes.
    pub fn cluster_means(&self) -> Vec<Vec<f64>> {
        let n = self.n_clusters_in;
        let c = self.channels;
        let r = if n > 1 { self.cluster_sep * (n as f64 / (n as f64 - 1.0)).sqrt() } else { self.cluster_sep };
        let mut means: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut m = vec![0.0; c];
                m[i] = r;
                m
            })
            .collect();
        let mut centroid = vec![0.0; c];
        for m in &means {
            centroid.iter_mut().zip(m).for_each(|(a, b)| *a += b / n as f64);
        }
        for j in 0..self.n_clusters_ood {
            let mut m = centroid.clone();
            if j > 0 {
                m[n + j - 1] += self.cluster_sep;
            }
            means.push(m);
        }
        means.iter().map(|m| m.iter().map(|&v| v as f32 as f64).collect()).collect()
    }
}

fn place_boxes(spec: &SyntheticSceneSpec, rng: &mut Rng) -> Result<Vec<Box>> {
    let n = rng.random_range(spec.boxes_per_scene.0..=spec.boxes_per_scene.1);
    let mut boxes: Vec<Box> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!("could not place {n} non-overlapping boxes on a {}x{} map", spec.map_h, spec.map_w)));
        }
        let w = rng.random_range(spec.box_size.0..=spec.box_size.1);
        let h = rng.random_range(spec.box_size.0..=spec.box_size.1);
        // painted cells span x..=x+w, so x+w must stay on the map
        let x = rng.random_range(0..spec.map_w - w);
        let y = rng.random_range(0..spec.map_h - h);
        let b = Box::new(x as f64, y as f64, w as f64, h as f64);
        // one clear cell between painted regions
        let apart = boxes.iter().all(|o| {
            b.x > o.x + o.w + 1.0 || o.x > b.x + b.w + 1.0 || b.y > o.y + o.h + 1.0 || o.y > b.y + b.h + 1.0
        });
        if apart {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

fn jitter_box(b: &Box, frac: f64, rng: &mut Rng) -> Box {
    let mut u = || if frac > 0.0 { rng.random_range(-frac..=frac) } else { 0.0 };
    let (dx, dy, dw, dh) = (u() * b.w, u() * b.h, u() * b.w, u() * b.h);
    Box::new(b.x + dx, b.y + dy, b.w + dw, b.h + dh)
}

fn make_scene(spec: &SyntheticSceneSpec, means: &[Vec<f64>], clusters: std::ops::Range<usize>, image_id: u64, seed: u64) -> Result<Scene> {
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let draw = |rng: &mut Rng| if spec.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
    let c = spec.channels;
    let mut data = Vec::with_capacity(spec.map_h * spec.map_w * c);
    for _ in 0..spec.map_h * spec.map_w * c {
        data.push(draw(&mut rng));
    }
    let mut map = FeatureMap::new(spec.map_h, spec.map_w, c, data)?;
    let boxes = place_boxes(spec, &mut rng)?;
    let mut gt = Vec::with_capacity(boxes.len());
    let mut candidates = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let cluster = rng.random_range(clusters.clone());
        let (x0, y0) = (b.x as usize, b.y as usize);
        for y in y0..=y0 + b.h as usize {
            for x in x0..=x0 + b.w as usize {
                for (ch, v) in map.at_mut(y, x).iter_mut().enumerate() {
                    *v = means[cluster][ch] + draw(&mut rng);
                }
            }
        }
        gt.push(GtBox { id: image_id * 1000 + i as u64, bbox: *b, category: Some(cluster as u64) });
        for _ in 0..spec.candidates_per_box {
            candidates.push(Candidate { bbox: jitter_box(b, spec.jitter, &mut rng), quality: None });
        }
    }
    let data = map.into_data().into_iter().map(|v| v as f32 as f64).collect();
    let map = FeatureMap::new(spec.map_h, spec.map_w, c, data)?;
    Ok(Scene { image_id, map, gt, candidates })
}

/// Generates train, in-distribution test and out-of-distribution test scenes.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let means = spec.cluster_means();
    let n_in = spec.n_clusters_in;
    let n_all = means.len();
    let split = |offset: u64, count: usize, clusters: std::ops::Range<usize>| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let id = offset + i as u64;
                make_scene(spec, &means, clusters.clone(), id, derive(spec.seed, id))
            })
            .collect()
    };
    Ok(SyntheticData {
        train: split(1, spec.n_scenes, 0..n_in)?,
        test_in: split(100_001, spec.n_test_in, 0..n_in)?,
        test_ood: split(200_001, spec.n_test_ood, n_in..n_all)?,
        cluster_means: means,
    })
}
