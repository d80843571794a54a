use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyHead;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::flow::CouplingFlow;
use crate::gauss::GaussianBank;
use crate::nn::{Activation, DenseNet};
use crate::pipeline::config::{Mode, TrainConfig};
use crate::rng::Rng;
use crate::upc::Standardizer;

/// Outputs of the proposal head: centreness and a box offset.
pub const RPN_OUT: usize = 5;
/// Outputs of the box head: box quality and a box offset.
pub const BBOX_OUT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Synthesizer {
    /// Bank fitted from the feature queues at the end of training, if any
    /// class reached the queue threshold.
    Gaussian(Option<GaussianBank>),
    Flow(CouplingFlow),
}

/// Every trained component of the detector's anomaly branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub channels: usize,
    /// Proposal head on pooled features.
    pub rpn_head: DenseNet,
    /// Shared head `g` producing object embeddings.
    pub shared: DenseNet,
    /// Box-quality head on embeddings.
    pub bbox_head: DenseNet,
    pub pcls_head: DenseNet,
    pub anomaly: AnomalyHead,
    pub synth: Synthesizer,
    pub centres: Vec<Vec<f64>>,
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: TrainConfig,
    channels: usize,
}

pub fn sidecar_path(bundle: &Path) -> PathBuf {
    let mut s = bundle.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    pub fn new(config: &TrainConfig, channels: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let z = config.roi_size * config.roi_size * channels;
        let d = config.embed_dim;
        let k = config.k_pseudo;
        let rpn_head = DenseNet::mlp(&[z, RPN_OUT], Activation::Identity, Activation::Identity, rng)?;
        let shared = DenseNet::mlp(&[z, config.shared_hidden, d], Activation::Relu, Activation::Identity, rng)?;
        let bbox_head = DenseNet::mlp(&[d, BBOX_OUT], Activation::Identity, Activation::Identity, rng)?;
        let pcls_head = DenseNet::mlp(&[d, config.pcls_hidden, k], Activation::Relu, Activation::Identity, rng)?;
        let anomaly = AnomalyHead::new(k, config.phi_hidden, rng)?;
        let synth = match config.mode {
            Mode::Ssos => Synthesizer::Gaussian(None),
            Mode::Ffs => Synthesizer::Flow(CouplingFlow::new(d, config.flow_layers, config.flow_hidden, rng)?),
        };
        Ok(Self {
            config: config.resolved(),
            channels,
            rpn_head,
            shared,
            bbox_head,
            pcls_head,
            anomaly,
            synth,
            centres: vec![vec![0.0; z]; k],
            standardizer: None,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.config.roi_size * self.config.roi_size * self.channels
    }

    fn dense_parts(&self) -> [(&'static str, &DenseNet); 5] {
        [
            ("rpn", &self.rpn_head),
            ("g", &self.shared),
            ("bbox", &self.bbox_head),
            ("pcls", &self.pcls_head),
            ("phi", &self.anomaly.phi.net),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (name, net) in self.dense_parts() {
            for (n, dims, data) in net.tensors(name) {
                c.push(n, dims, data)?;
            }
        }
        let k = self.config.k_pseudo;
        c.push("energy.w", vec![k], &self.anomaly.weights.w)?;
        let z = self.z_dim();
        let centres: Vec<f64> = self.centres.iter().flatten().copied().collect();
        c.push("centres", vec![k, z], &centres)?;
        if let Some(s) = &self.standardizer {
            c.push("std.mean", vec![z], &s.mean)?;
            c.push("std.scale", vec![z], &s.scale)?;
        }
        match &self.synth {
            Synthesizer::Gaussian(Some(bank)) => {
                let d = bank.dim();
                c.push("gauss.means", vec![k, d], &bank.means_flat())?;
                let counts: Vec<f64> = bank.counts().iter().map(|&n| n as f64).collect();
                c.push("gauss.counts", vec![k], &counts)?;
                c.push("gauss.cov", vec![d, d], bank.tied_cov())?;
                c.push("gauss.ridge", vec![1], &[bank.ridge()])?;
            }
            Synthesizer::Gaussian(None) => {}
            Synthesizer::Flow(flow) => {
                for (n, dims, data) in flow.tensors("flow") {
                    c.push(n, dims, data)?;
                }
            }
        }
        Ok(c)
    }

    /// Rebuilds a model from its checkpoint and configuration echo.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig, channels: usize) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let mut m = Model::new(config, channels, &mut rng)?;
        for (name, net) in [
            ("rpn", &mut m.rpn_head),
            ("g", &mut m.shared),
            ("bbox", &mut m.bbox_head),
            ("pcls", &mut m.pcls_head),
            ("phi", &mut m.anomaly.phi.net),
        ] {
            for (n, dst) in net.tensors_mut(name) {
                ckpt.read_into(&n, dst)?;
            }
        }
        ckpt.read_into("energy.w", &mut m.anomaly.weights.w)?;
        let z = m.z_dim();
        let centres = &ckpt.get("centres")?.data;
        if centres.len() != m.config.k_pseudo * z {
            return Err(Error::Format("centre section has the wrong size".into()));
        }
        m.centres = centres.chunks(z).map(<[f64]>::to_vec).collect();
        if ckpt.get("std.mean").is_ok() {
            let mut s = Standardizer { mean: vec![0.0; z], scale: vec![0.0; z] };
            ckpt.read_into("std.mean", &mut s.mean)?;
            ckpt.read_into("std.scale", &mut s.scale)?;
            m.standardizer = Some(s);
        }
        match &mut m.synth {
            Synthesizer::Gaussian(bank) => {
                if ckpt.get("gauss.means").is_ok() {
                    let d = m.config.embed_dim;
                    let counts: Vec<usize> = ckpt.get("gauss.counts")?.data.iter().map(|&n| n as usize).collect();
                    let cov = ckpt.get("gauss.cov")?.data.clone();
                    let ridge = ckpt.get("gauss.ridge")?.data[0];
                    *bank = Some(GaussianBank::from_parts(d, &ckpt.get("gauss.means")?.data, &counts, cov, ridge)?);
                }
            }
            Synthesizer::Flow(flow) => {
                for (n, dst) in flow.tensors_mut("flow") {
                    ckpt.read_into(&n, dst)?;
                }
            }
        }
        Ok(m)
    }

    /// Writes the checkpoint and its `.json` configuration sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = serde_json::to_vec_pretty(&Sidecar { config: self.config.clone(), channels: self.channels })?;
        self.to_checkpoint()?.save(path)?;
        crate::harness::io::write_atomic(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        Self::from_checkpoint(&Checkpoint::load(path)?, &sidecar.config, sidecar.channels)
    }
}
