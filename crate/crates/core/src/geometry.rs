//! Box geometry, localisation losses, score fusion and RoIAlign pooling.
//!
//! Boxes are stored as top-left corner plus width/height in feature-map
//! units. RoIAlign uses continuous coordinates without a half-pixel offset:
//! the value `data[y][x]` sits at the point `(x, y)`, bins partition the box
//! uniformly and each bin averages `samples_per_bin²` bilinear samples placed
//! at the centres of a regular sub-grid. Sample coordinates are clamped to
//! the map extent.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// IoU above which a proposal counts as matched to a ground-truth box.
pub const VALID_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn centre(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn params(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_params(p: [f64; 4]) -> Self {
        Self::new(p[0], p[1], p[2], p[3])
    }

    /// Parameters divided by the map extent (x and w by width, y and h by height).
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [self.x / width, self.y / height, self.w / width, self.h / height]
    }

    pub fn denormalized(p: [f64; 4], width: f64, height: f64) -> Self {
        Self::new(p[0] * width, p[1] * height, p[2] * width, p[3] * height)
    }
}

/// Quality scalars attached to a box prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityTargets {
    pub centreness: f64,
    pub box_quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_quality: Option<f64>,
}

impl QualityTargets {
    pub fn new(centreness: f64, box_quality: f64) -> Self {
        Self { centreness, box_quality, mask_quality: None }
    }

    pub fn with_mask(mut self, m: f64) -> Self {
        self.mask_quality = Some(m);
        self
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        ok(self.centreness) && ok(self.box_quality) && self.mask_quality.is_none_or(ok)
    }
}

/// Dense `H × W × C` grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("feature map dimensions must be positive".into()));
        }
        check_dim(height * width * channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    // areas from edge differences so that iou(a, a) is exactly 1
    let edge_area = |b: &Box| ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y);
    let union = edge_area(a) + edge_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// FCOS centreness of `point` with respect to `bx`.
pub fn centreness_target(point: (f64, f64), bx: &Box) -> Result<f64> {
    let (px, py) = point;
    let l = px - bx.x;
    let r = bx.x + bx.w - px;
    let t = py - bx.y;
    let b = bx.y + bx.h - py;
    if l < 0.0 || r < 0.0 || t < 0.0 || b < 0.0 {
        return Err(Error::PointOutsideBox { x: px, y: py });
    }
    let ratio = |a: f64, b: f64| {
        let hi = a.max(b);
        if hi <= 0.0 {
            0.0
        } else {
            a.min(b) / hi
        }
    };
    Ok((ratio(l, r) * ratio(t, b)).sqrt())
}

fn box_l1(a: &Box, b: &Box) -> f64 {
    a.params().iter().zip(b.params()).map(|(p, q)| (p - q).abs()).sum()
}

/// Proposal-level localisation loss: centreness L1 on every proposal plus
/// box L1 on matched proposals, averaged over all proposals.
pub fn rpn_loss(pred: &[(f64, Box)], target: &[(QualityTargets, Box)], matched: &[bool]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("rpn_loss predictions"));
    }
    check_dim(pred.len(), target.len())?;
    check_dim(pred.len(), matched.len())?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .zip(matched)
        .map(|(((c, p), (q, t)), &m)| {
            let box_term = if m { box_l1(p, t) } else { 0.0 };
            (c - q.centreness).abs() + box_term
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Box-head loss over valid proposals: box-quality L1 plus box L1.
pub fn bbox_loss(pred: &[(f64, Box)], target: &[(f64, Box)]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("bbox_loss predictions"));
    }
    check_dim(pred.len(), target.len())?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|((b, p), (bt, t))| (b - bt).abs() + box_l1(p, t))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Geometric mean of the present quality scalars.
pub fn fuse_score(q: &QualityTargets) -> f64 {
    match q.mask_quality {
        Some(m) => (q.centreness * q.box_quality * m).cbrt(),
        None => (q.centreness * q.box_quality).sqrt(),
    }
}

fn bilinear(map: &FeatureMap, x: f64, y: f64, out: &mut [f64], weight: f64) {
    let x = x.clamp(0.0, (map.width - 1) as f64);
    let y = y.clamp(0.0, (map.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ];
    for (cy, cx, cw) in corners {
        let w = cw * weight;
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.at(cy, cx)) {
            *o += w * v;
        }
    }
}

pub fn roi_align(
    map: &FeatureMap,
    bx: &Box,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(Error::InvalidArgument("roi_align sizes must be at least 1".into()));
    }
    if !bx.is_valid() {
        return Err(Error::InvalidArgument(format!("invalid box {bx:?}")));
    }
    if bx.w <= 0.0 || bx.h <= 0.0 {
        return Err(Error::ZeroAreaBox);
    }
    let c = map.channels;
    let bin_h = bx.h / out_h as f64;
    let bin_w = bx.w / out_w as f64;
    let s = samples_per_bin as f64;
    let weight = 1.0 / (s * s);
    let mut data = vec![0.0; out_h * out_w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let out = &mut data[(i * out_w + j) * c..(i * out_w + j + 1) * c];
            for sy in 0..samples_per_bin {
                let y = bx.y + (i as f64 + (sy as f64 + 0.5) / s) * bin_h;
                for sx in 0..samples_per_bin {
                    let x = bx.x + (j as f64 + (sx as f64 + 0.5) / s) * bin_w;
                    bilinear(map, x, y, out, weight);
                }
            }
        }
    }
    FeatureMap::new(out_h, out_w, c, data)
}

/// Row-major flattening of a pooled map.
pub fn flatten_pooled(pooled: &FeatureMap) -> Vec<f64> {
    pooled.data.clone()
}

pub fn unflatten_pooled(v: Vec<f64>, h: usize, w: usize, c: usize) -> Result<FeatureMap> {
    FeatureMap::new(h, w, c, v)
}
