use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SgdState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Class-conditional Gaussian synthesis.
    Ssos,
    /// Normalizing-flow synthesis.
    Ffs,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssos" => Ok(Mode::Ssos),
            "ffs" => Ok(Mode::Ffs),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (expected ssos or ffs)"))),
        }
    }
}

/// Training configuration. Serialises to flat JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub k_pseudo: usize,
    pub epochs: usize,
    /// Pseudo-classification loss weight.
    pub alpha: f64,
    /// Anomaly loss weight.
    pub beta: f64,
    /// Flow NLL loss weight (ffs mode).
    pub gamma: f64,
    /// Draws per synthesis call; `None` resolves to 10,000 (ssos) or 300 (ffs).
    pub sample_count: Option<usize>,
    /// Outliers kept per class (ssos) or per draw (ffs) each iteration.
    pub outliers_per_iter: usize,
    pub embed_dim: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub sgd: SgdState,
    /// Scenes per iteration.
    pub batch_size: usize,
    pub roi_size: usize,
    pub roi_samples: usize,
    pub shared_hidden: usize,
    pub pcls_hidden: usize,
    pub phi_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    /// Base learning rate for the flow's parameters. The flow gradient is
    /// scaled by `gamma`, so this sets the flow's effective step size.
    pub flow_learning_rate: f64,
    pub queue_capacity: usize,
    pub queue_min_fill: usize,
    pub kmeans_batch_size: usize,
    pub kmeans_iterations: usize,
    pub standardize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ssos,
            k_pseudo: 5,
            epochs: 8,
            alpha: 1.0,
            beta: 0.1,
            gamma: 1e-4,
            sample_count: None,
            outliers_per_iter: 1,
            embed_dim: 32,
            seed: 0,
            sgd: SgdState { learning_rate: 0.01, ..SgdState::default() },
            batch_size: 2,
            roi_size: 3,
            roi_samples: 2,
            shared_hidden: 64,
            pcls_hidden: 64,
            phi_hidden: 512,
            flow_layers: 4,
            flow_hidden: 32,
            flow_learning_rate: 20.0,
            queue_capacity: 256,
            queue_min_fill: 32,
            kmeans_batch_size: 256,
            kmeans_iterations: 10,
            standardize_features: false,
        }
    }
}

impl TrainConfig {
    pub fn samples(&self) -> usize {
        self.sample_count.unwrap_or(match self.mode {
            Mode::Ssos => 10_000,
            Mode::Ffs => 300,
        })
    }

    /// Parses flat JSON keys over the defaults. Unknown keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let overrides: serde_json::Value = serde_json::from_str(text)?;
        Self::default().with_overrides(&overrides)
    }

    /// Applies a JSON object of flat keys on top of `self`.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let obj = overrides.as_object().ok_or_else(|| Error::InvalidArgument("configuration must be a JSON object".into()))?;
        let mut base = serde_json::to_value(self)?;
        let fields = base.as_object_mut().expect("struct serialises to an object");
        for (k, v) in obj {
            if !fields.contains_key(k) {
                return Err(Error::InvalidArgument(format!("unknown configuration key {k:?}")));
            }
            fields.insert(k.clone(), v.clone());
        }
        Ok(serde_json::from_value(base)?)
    }

    /// Copy with `sample_count` filled in.
    pub fn resolved(&self) -> Self {
        Self { sample_count: Some(self.samples()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k_pseudo == 0 {
            return bad("k_pseudo must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.samples() == 0 || self.outliers_per_iter > self.samples() {
            return bad("sample_count must be positive and at least outliers_per_iter");
        }
        if self.embed_dim == 0 || self.batch_size == 0 || self.roi_size == 0 || self.roi_samples == 0 {
            return bad("embed_dim, batch_size, roi_size and roi_samples must be positive");
        }
        if self.shared_hidden == 0 || self.pcls_hidden == 0 || self.phi_hidden == 0 || self.flow_hidden == 0 || self.flow_layers == 0 {
            return bad("layer sizes must be positive");
        }
        if self.queue_capacity == 0 || self.queue_min_fill > self.queue_capacity {
            return bad("queue_min_fill must not exceed queue_capacity");
        }
        if self.kmeans_batch_size == 0 || self.kmeans_iterations == 0 {
            return bad("k-means batch size and iterations must be positive");
        }
        if !(self.flow_learning_rate > 0.0 && self.flow_learning_rate.is_finite()) {
            return bad("flow_learning_rate must be positive");
        }
        self.sgd.validate()
    }

    pub fn flow_sgd(&self) -> SgdState {
        SgdState { learning_rate: self.flow_learning_rate, ..self.sgd.clone() }
    }
}
