//! Training and inference over annotated feature scenes.

pub mod config;
pub mod infer;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::geometry::Box;

pub use config::{Mode, TrainConfig};
pub use infer::{flag_anomalies, infer, pick_uncertainty_threshold, score_candidate};
pub use model::{Model, Synthesizer};
pub use train::{train, BatchLosses, ModelGrads, TrainHistory, TrainOutput, Trainer};

/// One scored detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub score: f64,
    pub energy: f64,
    pub uncertainty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_anomaly: Option<bool>,
    pub image_id: u64,
}
