//! Annotated feature scenes: a backbone feature map plus ground-truth boxes
//! and detector candidates.

use serde::{Deserialize, Serialize};

use crate::eval::GroundTruth;
use crate::geometry::{Box, FeatureMap, QualityTargets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: u64,
    pub bbox: Box,
    /// Generating category; never used for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u64>,
}

/// A candidate box from the detector stand-in. When `quality` is present
/// the candidate is taken as final; otherwise the model's heads predict the
/// qualities and refine the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: Box,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub map: FeatureMap,
    pub gt: Vec<GtBox>,
    pub candidates: Vec<Candidate>,
}

pub fn ground_truth(scenes: &[Scene]) -> GroundTruth {
    scenes.iter().map(|s| (s.image_id, s.gt.iter().map(|g| g.bbox).collect())).collect()
}
