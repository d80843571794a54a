//! Epoch loop: re-cluster ground-truth features, then train every head on
//! proposals with outlier synthesis.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anomaly::{anomaly_loss_logits, AnomalyGrads};
use crate::error::{check_dim, Error, Result};
use crate::flow::FlowGrads;
use crate::gauss::FeatureQueue;
use crate::geometry::{centreness_target, flatten_pooled, iou, roi_align, Box, VALID_IOU};
use crate::nn::{DenseGrads, ForwardCache};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::model::{Model, Synthesizer};
use crate::rng::{derive, seeded, Rng};
use crate::scene::Scene;
use crate::upc::{assign_pseudo_label, inertia, init_centres, minibatch_kmeans, pcls_loss, KmeansConfig, PseudoLabelState, Standardizer};

/// A pooled proposal with its matching targets.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: Box,
    pub z: Vec<f64>,
    /// Index of the matched ground truth within its scene (IoU above the
    /// validity threshold).
    pub matched: Option<usize>,
    pub iou: f64,
    pub centreness: f64,
}

#[derive(Debug, Clone)]
struct PreparedScene {
    width: f64,
    height: f64,
    gt_boxes: Vec<Box>,
    /// Index of this scene's first ground truth in the global object list.
    gt_offset: usize,
    proposals: Vec<Proposal>,
}

pub fn pool(scene_map: &crate::geometry::FeatureMap, bbox: &Box, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Ok(flatten_pooled(&roi_align(scene_map, bbox, cfg.roi_size, cfg.roi_size, cfg.roi_samples)?))
}

/// Matches a proposal to the maximally overlapping ground truth.
pub fn match_proposal(bbox: &Box, gt: &[Box]) -> (Option<usize>, f64, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gt.iter().enumerate() {
        let o = iou(bbox, g);
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((i, o));
        }
    }
    match best {
        Some((i, o)) if o > 0.0 => {
            let c = centreness_target(bbox.centre(), &gt[i]).unwrap_or(0.0);
            ((o > VALID_IOU).then_some(i), o, c)
        }
        _ => (None, 0.0, 0.0),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub rpn: f64,
    pub bbox: f64,
    pub pcls: f64,
    pub anomaly: Option<f64>,
    pub nll: Option<f64>,
    pub total: f64,
    pub outliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub rpn: DenseGrads,
    pub shared: DenseGrads,
    pub bbox: DenseGrads,
    pub pcls: DenseGrads,
    pub anomaly: AnomalyGrads,
    pub flow: Option<FlowGrads>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub epoch: usize,
    pub iter: usize,
    pub losses: BatchLosses,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kmeans_inertia: f64,
    /// Objects whose pseudo-label changed since the previous epoch.
    pub relabelled: usize,
    /// Pseudo-class accuracy of the classifier on ground-truth boxes after the epoch.
    pub pcls_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainHistory {
    pub fn nll_series(&self) -> Vec<f64> {
        self.iterations.iter().filter_map(|l| l.losses.nll).collect()
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub history: TrainHistory,
    pub labels: PseudoLabelState,
    /// `(image_id, annotation_id)` of every clustered object, aligned with `labels`.
    pub object_ids: Vec<(u64, u64)>,
    pub object_features: Vec<Vec<f64>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct ProposalForward {
    rpn: ForwardCache,
    shared: ForwardCache,
    bbox: ForwardCache,
    pcls: ForwardCache,
}

/// Single-owner training state.
pub struct Trainer<'a> {
    pub model: Model,
    scenes: &'a [Scene],
    prepared: Vec<PreparedScene>,
    gt_features: Vec<Vec<f64>>,
    cluster_features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    queue: FeatureQueue,
    /// Recent embeddings, class-agnostic, for the flow likelihood.
    flow_buffer: VecDeque<Vec<f64>>,
    iter: usize,
    epoch: usize,
    rng: Rng,
    pub history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(scenes: &'a [Scene], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = scenes.first().ok_or(Error::Empty("training scenes"))?;
        let channels = first.map.channels();
        let mut rng = seeded(cfg.seed);
        let mut model = Model::new(cfg, channels, &mut rng)?;
        let cfg = model.config.clone();

        let mut prepared = Vec::with_capacity(scenes.len());
        let mut gt_features = Vec::new();
        for scene in scenes {
            check_dim(channels, scene.map.channels())?;
            if scene.gt.is_empty() {
                return Err(Error::InvalidArgument(format!("scene {} has no ground-truth boxes", scene.image_id)));
            }
            let gt_boxes: Vec<Box> = scene.gt.iter().map(|g| g.bbox).collect();
            let gt_offset = gt_features.len();
            for g in &gt_boxes {
                gt_features.push(pool(&scene.map, g, &cfg)?);
            }
            let proposals = gt_boxes
                .iter()
                .copied()
                .chain(scene.candidates.iter().map(|c| c.bbox))
                .map(|bbox| {
                    let (matched, o, centreness) = match_proposal(&bbox, &gt_boxes);
                    Ok(Proposal { bbox, z: pool(&scene.map, &bbox, &cfg)?, matched, iou: o, centreness })
                })
                .collect::<Result<Vec<_>>>()?;
            prepared.push(PreparedScene {
                width: scene.map.width() as f64,
                height: scene.map.height() as f64,
                gt_boxes,
                gt_offset,
                proposals,
            });
        }
        let cluster_features = if cfg.standardize_features {
            let s = Standardizer::fit(&gt_features)?;
            let f = gt_features.iter().map(|z| s.apply(z)).collect();
            model.standardizer = Some(s);
            f
        } else {
            gt_features.clone()
        };
        model.centres = init_centres(cfg.k_pseudo, model.z_dim(), derive(cfg.seed, 1));
        let queue = FeatureQueue::new(cfg.k_pseudo, cfg.queue_capacity, cfg.queue_min_fill)?;
        let n_objects = gt_features.len();
        Ok(Self {
            model,
            scenes,
            prepared,
            gt_features,
            cluster_features,
            labels: vec![usize::MAX; n_objects],
            queue,
            flow_buffer: VecDeque::new(),
            iter: 0,
            epoch: 0,
            rng,
            history: TrainHistory::default(),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Warm-started re-clustering of the ground-truth features.
    pub fn recluster(&mut self) -> Result<PseudoLabelState> {
        let cfg = &self.model.config;
        let kcfg = KmeansConfig {
            k: cfg.k_pseudo,
            batch_size: cfg.kmeans_batch_size,
            iterations: cfg.kmeans_iterations,
            seed: derive(cfg.seed, 100 + self.epoch as u64),
        };
        let mut state = minibatch_kmeans(&self.cluster_features, &kcfg, Some(&self.model.centres))?;
        state.epoch = self.epoch;
        self.model.centres = state.centres.clone();
        self.labels = state.assignments.clone();
        Ok(state)
    }

    fn proposal_label(&self, scene: usize, p: &Proposal) -> Option<usize> {
        p.matched.map(|gi| self.labels[self.prepared[scene].gt_offset + gi])
    }

    /// Losses and gradients for one mini-batch of scenes. Pushes the batch's
    /// matched embeddings into the feature queues.
    pub fn compute_batch(&mut self, scene_ids: &[usize]) -> Result<(BatchLosses, ModelGrads)> {
        let m = &self.model;
        let cfg = &m.config;
        let mut grads = ModelGrads {
            rpn: m.rpn_head.zero_grads(),
            shared: m.shared.zero_grads(),
            bbox: m.bbox_head.zero_grads(),
            pcls: m.pcls_head.zero_grads(),
            anomaly: m.anomaly.zero_grads(),
            flow: match &m.synth {
                Synthesizer::Flow(f) => Some(f.zero_grads()),
                Synthesizer::Gaussian(_) => None,
            },
        };
        let items: Vec<(usize, &Proposal)> =
            scene_ids.iter().flat_map(|&s| self.prepared[s].proposals.iter().map(move |p| (s, p))).collect();
        if items.is_empty() {
            return Err(Error::Empty("batch proposals"));
        }
        let mut fwd = Vec::with_capacity(items.len());
        for (_, p) in &items {
            let rpn = m.rpn_head.forward_cached(&p.z)?;
            let shared = m.shared.forward_cached(&p.z)?;
            let bbox = m.bbox_head.forward_cached(shared.output())?;
            let pcls = m.pcls_head.forward_cached(shared.output())?;
            fwd.push(ProposalForward { rpn, shared, bbox, pcls });
        }
        let labels: Vec<Option<usize>> = items.iter().map(|(s, p)| self.proposal_label(*s, p)).collect();
        let n = items.len() as f64;
        let n_valid = labels.iter().filter(|l| l.is_some()).count();
        let mut losses = BatchLosses::default();

        // per-proposal upstream gradients
        let mut g_rpn = vec![vec![0.0; crate::pipeline::model::RPN_OUT]; items.len()];
        let mut g_bbox = vec![vec![0.0; crate::pipeline::model::BBOX_OUT]; items.len()];
        let mut g_logits = vec![vec![0.0; cfg.k_pseudo]; items.len()];

        for (i, (s, p)) in items.iter().enumerate() {
            let ps = &self.prepared[*s];
            let out = fwd[i].rpn.output();
            let dc = out[0] - p.centreness;
            losses.rpn += dc.abs() / n;
            g_rpn[i][0] = sign(dc) / n;
            if let Some(gi) = p.matched {
                let prop = p.bbox.normalized(ps.width, ps.height);
                let target = ps.gt_boxes[gi].normalized(ps.width, ps.height);
                for j in 0..4 {
                    let d = prop[j] + out[1 + j] - target[j];
                    losses.rpn += d.abs() / n;
                    g_rpn[i][1 + j] = sign(d) / n;
                }
            }
        }
        if n_valid > 0 {
            let nv = n_valid as f64;
            let na = cfg.alpha / nv;
            for (i, (s, p)) in items.iter().enumerate() {
                let (Some(gi), Some(label)) = (p.matched, labels[i]) else { continue };
                let ps = &self.prepared[*s];
                let out = fwd[i].bbox.output();
                let db = out[0] - p.iou;
                losses.bbox += db.abs() / nv;
                g_bbox[i][0] = sign(db) / nv;
                let prop = p.bbox.normalized(ps.width, ps.height);
                let target = ps.gt_boxes[gi].normalized(ps.width, ps.height);
                for j in 0..4 {
                    let d = prop[j] + out[1 + j] - target[j];
                    losses.bbox += d.abs() / nv;
                    g_bbox[i][1 + j] = sign(d) / nv;
                }
                let (ce, g) = pcls_loss(fwd[i].pcls.output(), label)?;
                losses.pcls += ce / nv;
                g_logits[i].iter_mut().zip(&g).for_each(|(a, b)| *a += na * b);
            }
        }

        // queue update and outlier synthesis
        let inliers: Vec<usize> = (0..items.len()).filter(|&i| labels[i].is_some()).collect();
        for &i in &inliers {
            self.queue.push(labels[i].expect("inlier"), fwd[i].shared.output().to_vec())?;
        }
        let mut outliers = Vec::new();
        let seed_base = derive(cfg.seed, 0x5eed_0000 + self.iter as u64);
        match &m.synth {
            Synthesizer::Gaussian(_) => {
                if let Some(bank) = self.queue.fit()? {
                    for k in bank.active_classes() {
                        outliers.extend(bank.sample_virtual_outliers(k, cfg.samples(), cfg.outliers_per_iter, derive(seed_base, k as u64))?);
                    }
                }
            }
            Synthesizer::Flow(flow) => {
                outliers = flow.sample_outliers(cfg.samples(), cfg.outliers_per_iter, seed_base)?;
            }
        }
        losses.outliers = outliers.len();

        if !outliers.is_empty() && !inliers.is_empty() {
            let normal_fwd = inliers.iter().map(|&i| m.anomaly.forward(fwd[i].pcls.output())).collect::<Result<Vec<_>>>()?;
            let outlier_pcls = outliers.iter().map(|v| m.pcls_head.forward_cached(v)).collect::<Result<Vec<_>>>()?;
            let outlier_fwd = outlier_pcls.iter().map(|c| m.anomaly.forward(c.output())).collect::<Result<Vec<_>>>()?;
            let an: Vec<f64> = normal_fwd.iter().map(|f| f.logit).collect();
            let ao: Vec<f64> = outlier_fwd.iter().map(|f| f.logit).collect();
            let (loss, gn, go) = anomaly_loss_logits(&an, &ao)?;
            losses.anomaly = Some(loss);
            for ((&i, f), g) in inliers.iter().zip(&normal_fwd).zip(&gn) {
                let gf = m.anomaly.backward(f, cfg.beta * g, &mut grads.anomaly)?;
                g_logits[i].iter_mut().zip(&gf).for_each(|(a, b)| *a += b);
            }
            for ((cache, f), g) in outlier_pcls.iter().zip(&outlier_fwd).zip(&go) {
                let gf = m.anomaly.backward(f, cfg.beta * g, &mut grads.anomaly)?;
                m.pcls_head.backward_cached(cache, &gf, &mut grads.pcls)?;
            }
        }

        if let (Synthesizer::Flow(flow), Some(fg)) = (&m.synth, grads.flow.as_mut()) {
            for &i in &inliers {
                if self.flow_buffer.len() == cfg.queue_capacity {
                    self.flow_buffer.pop_front();
                }
                self.flow_buffer.push_back(fwd[i].shared.output().to_vec());
            }
            if !self.flow_buffer.is_empty() {
                let batch: Vec<Vec<f64>> = self.flow_buffer.iter().cloned().collect();
                let (nll, mut g) = flow.nll_loss(&batch)?;
                g.scale_by(cfg.gamma);
                *fg = g;
                losses.nll = Some(nll);
            }
        }

        for (i, f) in fwd.iter().enumerate() {
            m.rpn_head.backward_cached(&f.rpn, &g_rpn[i], &mut grads.rpn)?;
            let gv_bbox = m.bbox_head.backward_cached(&f.bbox, &g_bbox[i], &mut grads.bbox)?;
            let gv_pcls = m.pcls_head.backward_cached(&f.pcls, &g_logits[i], &mut grads.pcls)?;
            let gv: Vec<f64> = gv_bbox.iter().zip(&gv_pcls).map(|(a, b)| a + b).collect();
            m.shared.backward_cached(&f.shared, &gv, &mut grads.shared)?;
        }

        losses.total = losses.rpn
            + losses.bbox
            + cfg.alpha * losses.pcls
            + cfg.beta * losses.anomaly.unwrap_or(0.0)
            + cfg.gamma * losses.nll.unwrap_or(0.0);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {} ({losses:?})", self.iter)));
        }
        Ok((losses, grads))
    }

    pub fn apply(&mut self, grads: &ModelGrads) -> Result<()> {
        let (iter, epoch) = (self.iter, self.epoch);
        let m = &mut self.model;
        let sgd = m.config.sgd.clone();
        let flow_sgd = m.config.flow_sgd();
        m.rpn_head.apply_sgd(&grads.rpn, &sgd, iter, epoch)?;
        m.shared.apply_sgd(&grads.shared, &sgd, iter, epoch)?;
        m.bbox_head.apply_sgd(&grads.bbox, &sgd, iter, epoch)?;
        m.pcls_head.apply_sgd(&grads.pcls, &sgd, iter, epoch)?;
        m.anomaly.phi.net.apply_sgd(&grads.anomaly.phi, &sgd, iter, epoch)?;
        sgd.step(&mut m.anomaly.weights.w, &grads.anomaly.weights, iter, epoch)?;
        if let (Synthesizer::Flow(flow), Some(g)) = (&mut m.synth, &grads.flow) {
            flow.apply_sgd(g, &flow_sgd, iter, epoch)?;
        }
        Ok(())
    }

    /// Pseudo-class accuracy of the classifier on the ground-truth objects.
    pub fn pcls_accuracy(&self) -> Result<f64> {
        let mut correct = 0;
        for (z, &label) in self.gt_features.iter().zip(&self.labels) {
            let v = self.model.shared.forward(z)?;
            let logits = self.model.pcls_head.forward(&v)?;
            let pred = assign_argmax(&logits);
            correct += usize::from(pred == label);
        }
        Ok(correct as f64 / self.gt_features.len() as f64)
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let previous = self.labels.clone();
        let state = self.recluster()?;
        let relabelled = previous.iter().zip(&self.labels).filter(|(a, b)| a != b).count();
        let kmeans_inertia = inertia(&self.cluster_features, &state.centres, &state.assignments);
        self.queue.clear();
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let batch_size = self.model.config.batch_size;
        for batch in order.chunks(batch_size) {
            let (losses, grads) = self.compute_batch(batch)?;
            self.apply(&grads)?;
            self.history.iterations.push(IterationLog { epoch: self.epoch, iter: self.iter, losses });
            self.iter += 1;
        }
        let pcls_accuracy = self.pcls_accuracy()?;
        self.history.epochs.push(EpochLog { epoch: self.epoch, kmeans_inertia, relabelled, pcls_accuracy });
        self.epoch += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutput> {
        if let Synthesizer::Gaussian(bank) = &mut self.model.synth {
            *bank = self.queue.fit()?;
        }
        let labels = PseudoLabelState { centres: self.model.centres.clone(), assignments: self.labels.clone(), epoch: self.epoch };
        let object_ids = self
            .scenes
            .iter()
            .flat_map(|s| s.gt.iter().map(move |g| (s.image_id, g.id)))
            .collect();
        Ok(TrainOutput { model: self.model, history: self.history, labels, object_ids, object_features: self.gt_features })
    }
}

fn assign_argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Full training run.
pub fn train(scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(scenes, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

/// Pseudo-label of a pooled feature under a trained model's centres.
pub fn pseudo_label(model: &Model, z: &[f64]) -> Result<usize> {
    match &model.standardizer {
        Some(s) => assign_pseudo_label(&s.apply(z), &model.centres),
        None => assign_pseudo_label(z, &model.centres),
    }
}
