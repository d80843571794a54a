//! Unsupervised open-world object anomaly detection on backbone feature maps.
//!
//! Objects are clustered into pseudo-classes every epoch, a classifier is
//! trained on those labels, and virtual outliers drawn from low-likelihood
//! regions (class-conditional Gaussians or a normalizing flow) teach an
//! energy-based uncertainty head to separate unseen objects.

pub mod anomaly;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gauss;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod upc;

pub use anomaly::{anomaly_loss, energy, uncertainty, AnomalyHead, EnergyWeights, UncertaintyHead};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use eval::{auroc, average_recall, evaluate_detections, evaluate_open_world, fpr_at_95_tpr, GroundTruth, MetricReport};
pub use flow::{CouplingFlow, FlowGrads};
pub use gauss::{fit_gaussians, FeatureQueue, GaussianBank};
pub use geometry::{fuse_score, iou, roi_align, Box, FeatureMap, QualityTargets};
pub use nn::{Activation, DenseNet, SgdState};
pub use pipeline::{
    flag_anomalies, infer, pick_uncertainty_threshold, train, DetectionRecord, Mode, Model, TrainConfig, TrainOutput,
};
pub use scene::{Candidate, GtBox, Scene};
pub use upc::{assign_pseudo_label, minibatch_kmeans, KmeansConfig, PseudoLabelState};
