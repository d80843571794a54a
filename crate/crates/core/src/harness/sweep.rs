//! Train/infer/evaluate drivers and the pseudo-class × sample-count grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_open_world, MetricReport};
use crate::pipeline::{infer, train, DetectionRecord, Model, TrainConfig, TrainHistory};
use crate::scene::{ground_truth, Scene};

pub struct ExperimentOutput {
    pub model: Model,
    pub history: TrainHistory,
    pub in_records: Vec<DetectionRecord>,
    pub ood_records: Vec<DetectionRecord>,
    pub report: MetricReport,
}

impl ExperimentOutput {
    /// Fraction of out-of-distribution detections below the uncertainty threshold.
    pub fn ood_flag_recall(&self) -> f64 {
        let c = &self.report.counts;
        if c.ood_detections == 0 {
            0.0
        } else {
            c.ood_flagged as f64 / c.ood_detections as f64
        }
    }
}

pub fn run_experiment(
    train_scenes: &[Scene],
    test_in: &[Scene],
    test_ood: &[Scene],
    cfg: &TrainConfig,
    pixel_scale: f64,
) -> Result<ExperimentOutput> {
    let out = train(train_scenes, cfg)?;
    let in_records = infer(&out.model, test_in)?;
    let ood_records = infer(&out.model, test_ood)?;
    let report = evaluate_open_world(&in_records, &ground_truth(test_in), &ood_records, &ground_truth(test_ood), pixel_scale)?;
    Ok(ExperimentOutput { model: out.model, history: out.history, in_records, ood_records, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_pseudo: usize,
    pub sample_count: usize,
    pub ar10: f64,
    pub ar100: f64,
    pub auroc: f64,
    pub fpr95: f64,
}

pub const SWEEP_HEADER: &str = "k_pseudo,sample_count,ar10,ar100,auroc,fpr95";

/// One cell per `(k, samples)` pair, `k` outermost. Cell `i` trains with
/// seed `seed ^ i`; with `repeats > 1`, repeat `r` uses `(seed + r) ^ i` and
/// the row holds the mean over repeats.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    train_scenes: &[Scene],
    test_in: &[Scene],
    test_ood: &[Scene],
    base: &TrainConfig,
    ks: &[usize],
    samples: &[usize],
    seed: u64,
    repeats: usize,
    pixel_scale: f64,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || samples.is_empty() {
        return Err(Error::Empty("sweep axis"));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("sweep repeats must be at least 1".into()));
    }
    let cells: Vec<(usize, usize)> = ks.iter().flat_map(|&k| samples.iter().map(move |&s| (k, s))).collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|i| (0..repeats as u64).map(move |r| (i, r))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, r)| {
            let (k, s) = cells[i];
            let cell_seed = seed.wrapping_add(r) ^ i as u64;
            let cfg = TrainConfig { k_pseudo: k, sample_count: Some(s), seed: cell_seed, ..base.clone() };
            let out = run_experiment(train_scenes, test_in, test_ood, &cfg, pixel_scale)?;
            let r = &out.report;
            let need = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::InvalidArgument(format!("sweep cell has no {what}")));
            Ok([r.ar_at["10"], r.ar_at["100"], need(r.auroc, "AUROC")?, need(r.fpr95, "FPR95")?])
        })
        .collect::<Result<Vec<[f64; 4]>>>()?;
    Ok(cells
        .iter()
        .zip(runs.chunks(repeats))
        .map(|(&(k, s), runs)| {
            let mean = |j: usize| runs.iter().map(|m| m[j]).sum::<f64>() / repeats as f64;
            SweepRow { k_pseudo: k, sample_count: s, ar10: mean(0), ar100: mean(1), auroc: mean(2), fpr95: mean(3) }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.k_pseudo, r.sample_count, r.ar10, r.ar100, r.auroc, r.fpr95));
    }
    out
}
