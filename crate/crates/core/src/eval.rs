//! Class-agnostic recall metrics, the F1-optimal confidence threshold and
//! the anomaly-separation metrics (AUROC, FPR at 95% TPR).
//!
//! Matching is COCO-style greedy: detections in descending score order each
//! take the highest-IoU unmatched ground truth at or above the IoU threshold.
//! IoU thresholds are `0.50, 0.55, …, 0.95` computed as `percent / 100`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box};
use crate::pipeline::DetectionRecord;

/// Ground-truth boxes keyed by image id.
pub type GroundTruth = BTreeMap<u64, Vec<Box>>;

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

/// Fraction of positives that must sit at or above the uncertainty threshold.
pub const RETAIN_FRACTION_PERCENT: usize = 95;

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn by_image(dets: &[DetectionRecord]) -> BTreeMap<u64, Vec<&DetectionRecord>> {
    let mut map: BTreeMap<u64, Vec<&DetectionRecord>> = BTreeMap::new();
    for d in dets {
        map.entry(d.image_id).or_default().push(d);
    }
    for list in map.values_mut() {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    map
}

/// Greedy matching of score-sorted detections; returns the number of matches.
fn greedy_matches(dets: &[&DetectionRecord], gt: &[Box], thresh: f64) -> usize {
    let mut taken = vec![false; gt.len()];
    let mut matched = 0;
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            matched += 1;
        }
    }
    matched
}

pub fn average_recall(detections: &[DetectionRecord], gt: &GroundTruth, max_dets: usize) -> Result<f64> {
    let total: usize = gt.values().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("ground truth"));
    }
    let dets = by_image(detections);
    let thresholds = iou_thresholds();
    let mut recall_sum = 0.0;
    for t in thresholds {
        let mut matched = 0;
        for (image, boxes) in gt {
            if let Some(list) = dets.get(image) {
                let top = &list[..list.len().min(max_dets)];
                matched += greedy_matches(top, boxes, t);
            }
        }
        recall_sum += matched as f64 / total as f64;
    }
    Ok(recall_sum / thresholds.len() as f64)
}

/// Recall by object size; `None` marks a bin without ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRecall {
    #[serde(rename = "S")]
    pub small: Option<f64>,
    #[serde(rename = "M")]
    pub medium: Option<f64>,
    #[serde(rename = "L")]
    pub large: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

/// Size bin of a box whose coordinates are scaled by `pixel_scale` into
/// input-image pixels.
pub fn size_bin(b: &Box, pixel_scale: f64) -> SizeBin {
    let area = b.area() * pixel_scale * pixel_scale;
    if area < SMALL_AREA {
        SizeBin::Small
    } else if area <= LARGE_AREA {
        SizeBin::Medium
    } else {
        SizeBin::Large
    }
}

pub fn ar_by_size(detections: &[DetectionRecord], gt: &GroundTruth, max_dets: usize, pixel_scale: f64) -> Result<SizeRecall> {
    let restricted = |bin: SizeBin| -> Result<Option<f64>> {
        let filtered: GroundTruth = gt
            .iter()
            .map(|(k, v)| (*k, v.iter().copied().filter(|b| size_bin(b, pixel_scale) == bin).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        if filtered.is_empty() {
            Ok(None)
        } else {
            average_recall(detections, &filtered, max_dets).map(Some)
        }
    };
    Ok(SizeRecall {
        small: restricted(SizeBin::Small)?,
        medium: restricted(SizeBin::Medium)?,
        large: restricted(SizeBin::Large)?,
    })
}

/// Confidence threshold maximising F1 at `iou_thresh`; ties prefer the
/// larger threshold. Returns `(threshold, f1)`, `(0, 0)` without detections.
pub fn f1_optimal_threshold(detections: &[DetectionRecord], gt: &GroundTruth, iou_thresh: f64) -> Result<(f64, f64)> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::InvalidArgument("iou threshold must lie in (0, 1)".into()));
    }
    let mut candidates: Vec<f64> = detections.iter().map(|d| d.score).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let total_gt: usize = gt.values().map(Vec::len).sum();
    let dets = by_image(detections);
    let mut best = (0.0, 0.0);
    let mut found = false;
    for &thr in &candidates {
        let mut tp = 0;
        let mut kept = 0;
        for (image, list) in &dets {
            let above: Vec<&DetectionRecord> = list.iter().copied().filter(|d| d.score >= thr).collect();
            kept += above.len();
            if let Some(boxes) = gt.get(image) {
                tp += greedy_matches(&above, boxes, iou_thresh);
            }
        }
        let fp = kept - tp;
        let fn_ = total_gt - tp;
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        // candidates run from high to low, so only a strict gain moves down
        if !found || f1 > best.1 {
            best = (thr, f1);
            found = true;
        }
    }
    Ok(best)
}

/// Mann–Whitney AUROC: probability a positive outranks a negative, ties ½.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("auroc scores"));
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    // twice the Mann–Whitney U statistic, kept integral
    let mut u2: u128 = 0;
    for &p in pos {
        let below = sorted_neg.partition_point(|&n| n < p);
        let not_above = sorted_neg.partition_point(|&n| n <= p);
        u2 += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(u2 as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Largest observed value `τ` such that at least 95% of `values` are `≥ τ`.
pub fn retain_threshold(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("threshold values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut tau = sorted[0];
    for &v in &sorted {
        let at_or_above = n - sorted.partition_point(|&x| x < v);
        if at_or_above * 100 >= RETAIN_FRACTION_PERCENT * n {
            tau = v;
        } else {
            break;
        }
    }
    Ok(tau)
}

/// Fraction of negatives at or above the threshold that keeps 95% of positives.
pub fn fpr_at_95_tpr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if neg.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    let tau = retain_threshold(pos)?;
    Ok(neg.iter().filter(|&&n| n >= tau).count() as f64 / neg.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub detections: usize,
    pub ground_truth: usize,
    pub in_dist_detections: usize,
    pub in_dist_kept: usize,
    pub ood_detections: usize,
    pub ood_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// AR keyed by max detections (`"1"`, `"10"`, `"100"`).
    pub ar_at: BTreeMap<String, f64>,
    pub ar_by_size: SizeRecall,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub f1_threshold: f64,
    pub uncertainty_threshold: Option<f64>,
    pub counts: Counts,
}

pub const MAX_DETS: [usize; 3] = [1, 10, 100];

fn recall_block(dets: &[DetectionRecord], gt: &GroundTruth, pixel_scale: f64) -> Result<(BTreeMap<String, f64>, SizeRecall)> {
    let mut ar_at = BTreeMap::new();
    for m in MAX_DETS {
        ar_at.insert(m.to_string(), average_recall(dets, gt, m)?);
    }
    Ok((ar_at, ar_by_size(dets, gt, 100, pixel_scale)?))
}

/// Plain detection report: recall metrics and the F1-optimal threshold.
pub fn evaluate_detections(dets: &[DetectionRecord], gt: &GroundTruth, pixel_scale: f64) -> Result<MetricReport> {
    let (ar_at, ar_by_size) = recall_block(dets, gt, pixel_scale)?;
    let (f1_threshold, _) = f1_optimal_threshold(dets, gt, 0.5)?;
    Ok(MetricReport {
        ar_at,
        ar_by_size,
        auroc: None,
        fpr95: None,
        f1_threshold,
        uncertainty_threshold: None,
        counts: Counts { detections: dets.len(), ground_truth: gt.values().map(Vec::len).sum(), ..Counts::default() },
    })
}

/// Open-world anomaly protocol.
///
/// In-distribution detections are kept when their score reaches the
/// F1-optimal threshold; the uncertainty threshold keeps 95% of those above
/// it. Out-of-distribution detections below the threshold count as found
/// anomalies and their recall is measured against the OoD ground truth.
/// AUROC and FPR95 compare kept in-distribution λ (positives) with all OoD λ.
pub fn evaluate_open_world(
    in_dets: &[DetectionRecord],
    in_gt: &GroundTruth,
    ood_dets: &[DetectionRecord],
    ood_gt: &GroundTruth,
    pixel_scale: f64,
) -> Result<MetricReport> {
    let (f1_threshold, _) = f1_optimal_threshold(in_dets, in_gt, 0.5)?;
    let kept: Vec<f64> = in_dets.iter().filter(|d| d.score >= f1_threshold).map(|d| d.uncertainty).collect();
    let ood_lambda: Vec<f64> = ood_dets.iter().map(|d| d.uncertainty).collect();
    let tau = retain_threshold(&kept)?;
    let flagged: Vec<DetectionRecord> = ood_dets.iter().filter(|d| d.uncertainty < tau).cloned().collect();
    let (ar_at, ar_by_size) = recall_block(&flagged, ood_gt, pixel_scale)?;
    let (auroc, fpr95) = if ood_lambda.is_empty() {
        (None, None)
    } else {
        (Some(auroc(&kept, &ood_lambda)?), Some(fpr_at_95_tpr(&kept, &ood_lambda)?))
    };
    Ok(MetricReport {
        ar_at,
        ar_by_size,
        auroc,
        fpr95,
        f1_threshold,
        uncertainty_threshold: Some(tau),
        counts: Counts {
            detections: flagged.len(),
            ground_truth: ood_gt.values().map(Vec::len).sum(),
            in_dist_detections: in_dets.len(),
            in_dist_kept: kept.len(),
            ood_detections: ood_dets.len(),
            ood_flagged: flagged.len(),
        },
    })
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.ar_at.values().all(|v| v.is_finite())
            && opt(self.ar_by_size.small)
            && opt(self.ar_by_size.medium)
            && opt(self.ar_by_size.large)
            && opt(self.auroc)
            && opt(self.fpr95)
            && opt(self.uncertainty_threshold)
            && self.f1_threshold.is_finite()
    }

    /// `metric,value` rows; undefined values are written as `-1`.
    pub fn to_csv(&self) -> String {
        let v = |x: Option<f64>| x.map_or_else(|| "-1".to_string(), |x| x.to_string());
        let mut out = String::from("metric,value\n");
        for m in MAX_DETS {
            out.push_str(&format!("ar{m},{}\n", self.ar_at[&m.to_string()]));
        }
        out.push_str(&format!("ar_s,{}\n", v(self.ar_by_size.small)));
        out.push_str(&format!("ar_m,{}\n", v(self.ar_by_size.medium)));
        out.push_str(&format!("ar_l,{}\n", v(self.ar_by_size.large)));
        out.push_str(&format!("auroc,{}\n", v(self.auroc)));
        out.push_str(&format!("fpr95,{}\n", v(self.fpr95)));
        out.push_str(&format!("f1_threshold,{}\n", self.f1_threshold));
        out.push_str(&format!("uncertainty_threshold,{}\n", v(self.uncertainty_threshold)));
        let c = &self.counts;
        for (name, n) in [
            ("detections", c.detections),
            ("ground_truth", c.ground_truth),
            ("in_dist_detections", c.in_dist_detections),
            ("in_dist_kept", c.in_dist_kept),
            ("ood_detections", c.ood_detections),
            ("ood_flagged", c.ood_flagged),
        ] {
            out.push_str(&format!("{name},{n}\n"));
        }
        out
    }
}
