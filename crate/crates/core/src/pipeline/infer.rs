use rayon::prelude::*;

use crate::error::{check_dim, Result};
use crate::eval::retain_threshold;
use crate::geometry::{fuse_score, Box, FeatureMap, QualityTargets};
use crate::pipeline::model::Model;
use crate::pipeline::train::pool;
use crate::pipeline::DetectionRecord;
use crate::scene::{Candidate, Scene};

/// Scores one candidate on a feature map.
pub fn score_candidate(model: &Model, map: &FeatureMap, image_id: u64, cand: &Candidate) -> Result<DetectionRecord> {
    check_dim(model.channels, map.channels())?;
    let z = pool(map, &cand.bbox, &model.config)?;
    let v = model.shared.forward(&z)?;
    let logits = model.pcls_head.forward(&v)?;
    let fwd = model.anomaly.forward(&logits)?;
    let (bbox, quality) = match cand.quality {
        Some(q) => (cand.bbox, q),
        None => {
            let rpn = model.rpn_head.forward(&z)?;
            let head = model.bbox_head.forward(&v)?;
            let (w, h) = (map.width() as f64, map.height() as f64);
            let p = cand.bbox.normalized(w, h);
            let refined = [p[0] + head[1], p[1] + head[2], p[2] + head[3], p[3] + head[4]];
            let mut bbox = Box::denormalized(refined, w, h);
            if !bbox.is_valid() {
                bbox = cand.bbox;
            }
            (bbox, QualityTargets::new(rpn[0].clamp(0.0, 1.0), head[0].clamp(0.0, 1.0)))
        }
    };
    Ok(DetectionRecord {
        bbox,
        score: fuse_score(&quality),
        energy: fwd.energy,
        uncertainty: fwd.lambda,
        is_anomaly: None,
        image_id,
    })
}

/// Scores every candidate of every scene. Output order follows the input.
pub fn infer(model: &Model, scenes: &[Scene]) -> Result<Vec<DetectionRecord>> {
    let per_scene: Vec<Vec<DetectionRecord>> = scenes
        .par_iter()
        .map(|s| s.candidates.iter().map(|c| score_candidate(model, &s.map, s.image_id, c)).collect())
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Threshold retaining 95% of the given (in-distribution) uncertainties.
pub fn pick_uncertainty_threshold(records: &[DetectionRecord]) -> Result<f64> {
    retain_threshold(&records.iter().map(|r| r.uncertainty).collect::<Vec<_>>())
}

/// Marks records with `λ < τ` as anomalous.
pub fn flag_anomalies(records: &[DetectionRecord], tau: f64) -> Vec<DetectionRecord> {
    records.iter().map(|r| DetectionRecord { is_anomaly: Some(r.uncertainty < tau), ..r.clone() }).collect()
}
