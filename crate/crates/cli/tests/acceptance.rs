//! Acceptance suite. Runs every criterion in order, prints one
//! `criterion N: PASS|FAIL` line each, then fails if any criterion failed.
//!
//! Runs without the libtest harness so the lines are always shown and the
//! timed criteria run alone.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng as _;
use ssos_core::anomaly::{anomaly_loss_logits, energy, AnomalyHead, EnergyWeights};
use ssos_core::eval::{auroc, average_recall, f1_optimal_threshold, fpr_at_95_tpr, GroundTruth};
use ssos_core::flow::CouplingFlow;
use ssos_core::gauss::fit_gaussians;
use ssos_core::geometry::{iou, roi_align, Box, FeatureMap};
use ssos_core::harness::sweep::run_experiment;
use ssos_core::harness::synth::{generate_synthetic, SyntheticData, SyntheticSceneSpec};
use ssos_core::harness::with_thread_pool;
use ssos_core::nn::{Activation, DenseGrads, DenseNet};
use ssos_core::pipeline::{score_candidate, DetectionRecord, Mode, TrainConfig};
use ssos_core::rng::{seeded, Rng};
use ssos_core::scene::Candidate;
use ssos_core::upc::{assign_pseudo_label, minibatch_kmeans, pcls_loss, KmeansConfig};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_criterion(n: usize, f: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match outcome {
        Ok(detail) => {
            println!("criterion {n}: PASS ({detail})");
            true
        }
        Err(detail) => {
            println!("criterion {n}: FAIL ({detail})");
            false
        }
    }
}

fn randvec(n: usize, rng: &mut Rng, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

// ---- 1: finite-difference gradient suite ----

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn dense_flat(g: &DenseGrads) -> Vec<Vec<f64>> {
    g.weight.iter().zip(&g.bias).flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
}

fn worst_param_error<M: Clone>(
    model: &M,
    tensors_mut: impl Fn(&mut M) -> Vec<(String, &mut Vec<f64>)>,
    analytic: &[Vec<f64>],
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let mut plus = model.clone();
            tensors_mut(&mut plus)[t].1[j] += FD_STEP;
            let mut minus = model.clone();
            tensors_mut(&mut minus)[t].1[j] -= FD_STEP;
            worst = worst.max(rel_err(a, (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn grad_shared_and_pcls(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let g = DenseNet::mlp(&[6, 5, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let pcls = DenseNet::mlp(&[4, 5, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let z = randvec(6, &mut rng, 2.0);
    let label = (seed % 3) as usize;
    let loss = |g: &DenseNet, p: &DenseNet| pcls_loss(&p.forward(&g.forward(&z).unwrap()).unwrap(), label).unwrap().0;
    let cg = g.forward_cached(&z).unwrap();
    let cp = pcls.forward_cached(cg.output()).unwrap();
    let (_, dlogits) = pcls_loss(cp.output(), label).unwrap();
    let mut gp = pcls.zero_grads();
    let dv = pcls.backward_cached(&cp, &dlogits, &mut gp).unwrap();
    let mut gg = g.zero_grads();
    g.backward_cached(&cg, &dv, &mut gg).unwrap();
    let e1 = worst_param_error(&g, |m| m.tensors_mut("g"), &dense_flat(&gg), |m| loss(m, &pcls));
    let e2 = worst_param_error(&pcls, |m| m.tensors_mut("p"), &dense_flat(&gp), |m| loss(&g, m));
    e1.max(e2)
}

fn grad_energy_and_phi(seed: u64) -> f64 {
    let mut rng = seeded(1000 + seed);
    let k = 4;
    let mut head = AnomalyHead::new(k, 8, &mut rng).unwrap();
    head.weights.w = randvec(k, &mut rng, 0.5).iter().map(|v| 1.0 + v).collect();
    let normals: Vec<Vec<f64>> = (0..3).map(|_| randvec(k, &mut rng, 3.0)).collect();
    let outliers: Vec<Vec<f64>> = (0..2).map(|_| randvec(k, &mut rng, 3.0)).collect();
    let loss = |h: &AnomalyHead| {
        let a = |v: &Vec<f64>| h.forward(v).unwrap().logit;
        anomaly_loss_logits(&normals.iter().map(a).collect::<Vec<_>>(), &outliers.iter().map(a).collect::<Vec<_>>()).unwrap().0
    };
    let fwd_n: Vec<_> = normals.iter().map(|v| head.forward(v).unwrap()).collect();
    let fwd_o: Vec<_> = outliers.iter().map(|v| head.forward(v).unwrap()).collect();
    let logits = |f: &[ssos_core::anomaly::AnomalyForward]| f.iter().map(|f| f.logit).collect::<Vec<_>>();
    let (_, gn, go) = anomaly_loss_logits(&logits(&fwd_n), &logits(&fwd_o)).unwrap();
    let mut grads = head.zero_grads();
    for (f, g) in fwd_n.iter().zip(&gn).chain(fwd_o.iter().zip(&go)) {
        head.backward(f, *g, &mut grads).unwrap();
    }
    let mut analytic = vec![grads.weights.clone()];
    analytic.extend(dense_flat(&grads.phi));
    worst_param_error(&head, head_tensors, &analytic, loss)
}

fn head_tensors(h: &mut AnomalyHead) -> Vec<(String, &mut Vec<f64>)> {
    let mut t = vec![("w".to_string(), &mut h.weights.w)];
    t.extend(h.phi.net.tensors_mut("phi"));
    t
}

fn random_flow(d: usize, layers: usize, rng: &mut Rng) -> CouplingFlow {
    let mut flow = CouplingFlow::new(d, layers, 6, rng).unwrap();
    for (_, p) in flow.tensors_mut("f") {
        p.iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
    }
    flow
}

fn grad_flow(seed: u64) -> f64 {
    let mut rng = seeded(2000 + seed);
    let d = 4;
    let flow = random_flow(d, 4, &mut rng);
    let batch: Vec<Vec<f64>> = (0..3).map(|_| randvec(d, &mut rng, 1.5)).collect();
    let (_, grads) = flow.nll_loss(&batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads
        .scale
        .iter()
        .zip(&grads.shift)
        .flat_map(|(s, t)| {
            let mut v = dense_flat(s);
            v.extend(dense_flat(t));
            v
        })
        .collect();
    worst_param_error(&flow, |f| f.tensors_mut("f"), &analytic, |f| f.nll_loss(&batch).unwrap().0)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for seed in 0..10 {
        worst[0] = worst[0].max(grad_shared_and_pcls(seed));
        worst[1] = worst[1].max(grad_energy_and_phi(seed));
        worst[2] = worst[2].max(grad_flow(seed));
    }
    let t = start.elapsed();
    let msg = format!(
        "worst rel err g+pcls {:.1e}, energy+phi {:.1e}, flow {:.1e}; {:.2}s",
        worst[0],
        worst[1],
        worst[2],
        t.as_secs_f64()
    );
    ensure(worst.iter().all(|&e| e < FD_TOL) && t < Duration::from_secs(30), msg)
}

// ---- 2: Gaussian fit ----

fn criterion_2() -> Check {
    let feats = vec![(vec![0.0, 0.0], 0), (vec![2.0, 0.0], 0), (vec![0.0, 2.0], 1), (vec![0.0, 4.0], 1)];
    let bank = fit_gaussians(&feats, 2).map_err(|e| e.to_string())?;
    let want: [(&[f64], &[f64]); 3] = [
        (bank.mean(0).unwrap(), &[1.0, 0.0]),
        (bank.mean(1).unwrap(), &[0.0, 3.0]),
        (bank.tied_cov(), &[0.5, 0.0, 0.0, 0.5]),
    ];
    let err = want.iter().flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
    ensure(err <= 1e-12, format!("max abs error {err:.1e}"))
}

// ---- 3: flow invertibility and log-determinant ----

fn criterion_3() -> Check {
    let mut worst_trip = 0.0f64;
    let mut worst_logdet = 0.0f64;
    for p in 0..20u64 {
        let mut rng = seeded(3000 + p);
        let d = 2 + (p as usize % 7);
        let flow = random_flow(d, 2 + (p as usize % 3), &mut rng);
        let v = randvec(d, &mut rng, 2.0);
        let (xi, log_det) = flow.forward(&v).unwrap();
        let back = flow.inverse(&xi).unwrap();
        worst_trip = worst_trip.max(back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let h = 1e-5;
        let jac = DMatrix::from_fn(d, d, |i, j| {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            (flow.forward(&vp).unwrap().0[i] - flow.forward(&vm).unwrap().0[i]) / (2.0 * h)
        });
        let numeric = jac.determinant().abs().ln();
        worst_logdet = worst_logdet.max((numeric - log_det).abs() / log_det.abs().max(1.0));
    }
    ensure(
        worst_trip < 1e-6 && worst_logdet < 1e-4,
        format!("round trip {worst_trip:.1e}, log-det rel err {worst_logdet:.1e} over 20 flows"),
    )
}

// ---- 4: RoIAlign against a brute-force bilinear reference ----

fn bilinear_reference(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let x = x.clamp(0.0, (map.width() - 1) as f64);
    let y = y.clamp(0.0, (map.height() - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width() - 1), (y0 + 1).min(map.height() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..map.channels())
        .map(|c| {
            let top = map.at(y0, x0)[c] * (1.0 - fx) + map.at(y0, x1)[c] * fx;
            let bottom = map.at(y1, x0)[c] * (1.0 - fx) + map.at(y1, x1)[c] * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}

fn criterion_4() -> Check {
    let mut rng = seeded(4000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..4));
        let map = FeatureMap::new(h, w, c, randvec(h * w * c, &mut rng, 5.0)).unwrap();
        let bx = Box::new(
            rng.random_range(-2.0..w as f64),
            rng.random_range(-2.0..h as f64),
            rng.random_range(0.1..w as f64 + 2.0),
            rng.random_range(0.1..h as f64 + 2.0),
        );
        let (oh, ow, s) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let got = roi_align(&map, &bx, oh, ow, s).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let mut want = vec![0.0; c];
                for sy in 0..s {
                    for sx in 0..s {
                        let y = bx.y + bx.h * (i as f64 + (sy as f64 + 0.5) / s as f64) / oh as f64;
                        let x = bx.x + bx.w * (j as f64 + (sx as f64 + 0.5) / s as f64) / ow as f64;
                        for (a, v) in want.iter_mut().zip(bilinear_reference(&map, x, y)) {
                            *a += v / (s * s) as f64;
                        }
                    }
                }
                let err = got.at(i, j).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
    }
    ensure(worst < 1e-6, format!("max abs error {worst:.1e} over 100 map/box pairs"))
}

// ---- 5: k-means against Lloyd ----

fn lloyd(points: &[Vec<f64>], mut centres: Vec<Vec<f64>>, iters: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut inertias = Vec::new();
    for _ in 0..iters {
        let labels: Vec<usize> = points.iter().map(|p| assign_pseudo_label(p, &centres).unwrap()).collect();
        inertias.push(
            points.iter().zip(&labels).map(|(p, &l)| p.iter().zip(&centres[l]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum(),
        );
        for (k, c) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (j, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    (centres, inertias)
}

fn criterion_5() -> Check {
    let points: Vec<Vec<f64>> = (0..40).map(|i| vec![if i < 20 { 0.0 } else { 10.0 }]).collect();
    let warm = vec![vec![1.0], vec![9.0]];
    let (want, inertias) = lloyd(&points, warm.clone(), 20);
    let monotone = inertias.windows(2).all(|w| w[1] <= w[0]);
    let cfg = KmeansConfig { k: 2, batch_size: 8, iterations: 10, seed: 5 };
    let got = minibatch_kmeans(&points, &cfg, Some(&warm)).map_err(|e| e.to_string())?;
    let err = got.centres.iter().zip(&want).map(|(a, b)| (a[0] - b[0]).abs()).fold(0.0, f64::max);
    let expected = (want[0][0] - 0.0).abs() < 1e-12 && (want[1][0] - 10.0).abs() < 1e-12;
    ensure(
        err < 1e-3 && monotone && expected,
        format!("centres {:?} vs Lloyd {:?} (err {err:.1e}), Lloyd inertia non-increasing: {monotone}", got.centres, want),
    )
}

// ---- 6: metric fixtures ----

fn record(image_id: u64, bbox: Box, score: f64) -> DetectionRecord {
    DetectionRecord { bbox, score, energy: 0.0, uncertainty: 0.5, is_anomaly: None, image_id }
}

/// Exhaustive F1 sweep: every cut-point, every detection ordering handled by
/// explicit greedy matching per image.
fn f1_oracle(dets: &[DetectionRecord], gt: &GroundTruth, thr: f64) -> (f64, f64) {
    let mut cuts: Vec<f64> = dets.iter().map(|d| d.score).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let total: usize = gt.values().map(Vec::len).sum();
    let mut best = (0.0, -1.0);
    for &cut in &cuts {
        let mut tp = 0;
        let mut kept = 0;
        for (img, boxes) in gt {
            let mut mine: Vec<&DetectionRecord> = dets.iter().filter(|d| d.image_id == *img && d.score >= cut).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            kept += mine.len();
            let mut used = vec![false; boxes.len()];
            for d in mine {
                let pick = (0..boxes.len())
                    .filter(|&g| !used[g] && iou(&d.bbox, &boxes[g]) >= thr)
                    .max_by(|&a, &b| iou(&d.bbox, &boxes[a]).total_cmp(&iou(&d.bbox, &boxes[b])).then(b.cmp(&a)));
                if let Some(g) = pick {
                    used[g] = true;
                    tp += 1;
                }
            }
        }
        kept += dets.iter().filter(|d| !gt.contains_key(&d.image_id) && d.score >= cut).count();
        let f1 = 2.0 * tp as f64 / (kept + total) as f64;
        if f1 > best.1 {
            best = (cut, f1);
        }
    }
    best
}

fn fpr95_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut candidates = pos.to_vec();
    candidates.sort_by(f64::total_cmp);
    let tau = candidates
        .iter()
        .copied()
        .filter(|&t| pos.iter().filter(|&&p| p >= t).count() as f64 >= 0.95 * pos.len() as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    neg.iter().filter(|&&n| n >= tau).count() as f64 / neg.len() as f64
}

fn criterion_6() -> Check {
    let gt: GroundTruth = [(1, vec![Box::new(0.0, 0.0, 10.0, 10.0)])].into();
    let ar = average_recall(&[record(1, Box::new(0.0, 0.0, 6.0, 10.0), 0.9)], &gt, 100).map_err(|e| e.to_string())?;
    let auc = auroc(&[0.9, 0.4], &[0.5, 0.1]).map_err(|e| e.to_string())?;

    let pos: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let neg: Vec<f64> = (0..10).map(|i| 0.02 + 0.11 * i as f64).collect();
    let fpr = fpr_at_95_tpr(&pos, &neg).map_err(|e| e.to_string())?;
    let fpr_want = fpr95_oracle(&pos, &neg);

    let (f1_dets, f1_gt) = f1_fixture();
    let (thr, f1) = f1_optimal_threshold(&f1_dets, &f1_gt, 0.5).map_err(|e| e.to_string())?;
    let (thr_want, f1_want) = f1_oracle(&f1_dets, &f1_gt, 0.5);

    ensure(
        ar == 0.3 && auc == 0.75 && fpr == fpr_want && thr == thr_want && f1 == f1_want,
        format!("AR {ar}, AUROC {auc}, FPR95 {fpr} (oracle {fpr_want}), F1 threshold {thr}/{f1} (oracle {thr_want}/{f1_want})"),
    )
}

fn f1_fixture() -> (Vec<DetectionRecord>, GroundTruth) {
    let text = std::fs::read_to_string(fixture("f1_records.json")).unwrap();
    let dets: Vec<DetectionRecord> = serde_json::from_str(&text).unwrap();
    let ds = ssos_core::harness::coco::load_coco_annotations(&fixture("f1_gt.json")).unwrap();
    let gt = ds.boxes.iter().map(|(&id, b)| (id, b.iter().map(|g| g.bbox).collect())).collect();
    (dets, gt)
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---- 7: energy identities ----

fn criterion_7() -> Check {
    let mut rng = seeded(7000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..12);
        let f = randvec(k, &mut rng, 10.0);
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let ones = EnergyWeights::ones(k);
        worst = worst.max((energy(&shifted, &ones).unwrap() - (energy(&f, &ones).unwrap() - c)).abs());
    }
    let pair = (energy(&[0.0, 0.0], &EnergyWeights::ones(2)).unwrap() + 2f64.ln()).abs();
    ensure(worst <= 1e-12 && pair <= 1e-12, format!("shift identity err {worst:.1e}, E((0,0)) err {pair:.1e}"))
}

// ---- 8 and 9: synthetic end-to-end ----

fn synthetic() -> SyntheticData {
    generate_synthetic(&SyntheticSceneSpec::default()).unwrap()
}

fn criterion_8(data: &SyntheticData) -> Check {
    let spec = SyntheticSceneSpec::default();
    let start = Instant::now();
    let out = single_threaded(|| run_experiment(&data.train, &data.test_in, &data.test_ood, &TrainConfig::default(), spec.stride))?;
    let t = start.elapsed();
    let auc = out.report.auroc.unwrap_or(f64::NAN);
    let recall = out.ood_flag_recall();
    let tau = out.report.uncertainty_threshold.unwrap_or(f64::NAN);

    // a candidate whose features sit exactly on an inlier cluster centre
    let centre = &data.cluster_means[0];
    let mut map = FeatureMap::filled(spec.map_h, spec.map_w, centre.len(), 0.0).unwrap();
    for y in 0..spec.map_h {
        for x in 0..spec.map_w {
            map.at_mut(y, x).copy_from_slice(centre);
        }
    }
    let cand = Candidate { bbox: Box::new(8.0, 8.0, 6.0, 6.0), quality: None };
    let lambda = score_candidate(&out.model, &map, 0, &cand).map_err(|e| e.to_string())?.uncertainty;

    ensure(
        auc >= 0.95 && recall >= 0.80 && t < Duration::from_secs(120) && lambda >= tau,
        format!("AUROC {auc:.4}, OoD flag recall {recall:.4}, centre lambda {lambda:.4} vs tau {tau:.4}, {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_9(data: &SyntheticData) -> Check {
    let spec = SyntheticSceneSpec::default();
    let cfg = TrainConfig { mode: Mode::Ffs, sample_count: Some(300), ..TrainConfig::default() };
    let out = single_threaded(|| run_experiment(&data.train, &data.test_in, &data.test_ood, &cfg, spec.stride))?;
    let auc = out.report.auroc.unwrap_or(f64::NAN);
    let nll = out.history.nll_series();
    if nll.len() < 200 {
        return Err(format!("only {} flow steps recorded", nll.len()));
    }
    let ma: Vec<f64> = nll[..200].windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let violations = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    ensure(
        auc >= 0.90 && violations == 0,
        format!("AUROC {auc:.4}, moving-average increases in first 200 steps: {violations}, NLL {:.3} -> {:.3}", ma[0], ma[ma.len() - 1]),
    )
}

fn single_threaded<T: Send>(f: impl FnOnce() -> ssos_core::Result<T> + Send) -> std::result::Result<T, String> {
    std::env::set_var(ssos_core::harness::THREADS_ENV, "1");
    let r = with_thread_pool(f).map_err(|e| e.to_string())?;
    r.map_err(|e| e.to_string())
}

// ---- 10 and 11: through the binary ----

fn ssos(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssos"))
        .args(args)
        .env(ssos_core::harness::THREADS_ENV, "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ssos {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A single seed is too noisy to compare cells; k=1 ranges from 0.19 to 0.98
/// AUROC across seeds on the default data.
const SWEEP_REPEATS: usize = 3;

fn criterion_10(data_dir: &Path) -> Check {
    let csv = data_dir.join("sweep.csv");
    ssos(&["sweep", "--data", p(data_dir), "--k", "1,2,5,10", "--repeats", &SWEEP_REPEATS.to_string(), "--out", p(&csv)])?;
    let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("missing column {name}"));
    let (kc, ac) = (col("k_pseudo")?, col("auroc")?);
    let mut by_k = std::collections::BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        by_k.insert(f[kc].parse::<usize>().unwrap(), f[ac].parse::<f64>().unwrap());
    }
    let (a1, a5) = (by_k.get(&1).copied().unwrap_or(f64::NAN), by_k.get(&5).copied().unwrap_or(f64::NAN));
    ensure(by_k.len() == 4 && a5 >= a1 + 0.05, format!("mean AUROC over {SWEEP_REPEATS} seeds by k: {by_k:?}"))
}

fn criterion_11(data_dir: &Path) -> Check {
    let run = |tag: &str| -> std::result::Result<Vec<Vec<u8>>, String> {
        let dir = data_dir.join(tag);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let model = dir.join("model.ckpt");
        let (rin, rood) = (dir.join("in.json"), dir.join("ood.json"));
        let (metrics, csv) = (dir.join("metrics.json"), dir.join("metrics.csv"));
        ssos(&["train", "--scenes", p(&data_dir.join("train")), "--seed", "3", "--out", p(&model)])?;
        ssos(&["infer", "--model", p(&model), "--scenes", p(&data_dir.join("test_in")), "--out", p(&rin)])?;
        ssos(&["infer", "--model", p(&model), "--scenes", p(&data_dir.join("test_ood")), "--out", p(&rood)])?;
        let gt_in = data_dir.join("test_in.json");
        let gt_ood = data_dir.join("test_ood.json");
        ssos(&[
            "eval", "--records", p(&rin), "--gt", p(&gt_in), "--ood-records", p(&rood), "--ood-gt", p(&gt_ood), "--out", p(&metrics),
            "--csv", p(&csv),
        ])?;
        let mut sidecar = model.as_os_str().to_owned();
        sidecar.push(".json");
        [model.clone(), sidecar.into(), rin, rood, metrics, csv]
            .iter()
            .map(|f| std::fs::read(f).map_err(|e| format!("{}: {e}", f.display())))
            .collect()
    };
    let a = run("run_a")?;
    let b = run("run_b")?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    ensure(same == a.len(), format!("{same}/{} artefacts byte-identical (bundle, sidecar, records, metrics)", a.len()))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let data = synthetic();
    let synth = || ssos(&["synth", "--out", p(&data_dir)]);
    let results = [
        run_criterion(1, criterion_1),
        run_criterion(2, criterion_2),
        run_criterion(3, criterion_3),
        run_criterion(4, criterion_4),
        run_criterion(5, criterion_5),
        run_criterion(6, criterion_6),
        run_criterion(7, criterion_7),
        run_criterion(8, || criterion_8(&data)),
        run_criterion(9, || criterion_9(&data)),
        run_criterion(10, || synth().and_then(|_| criterion_10(&data_dir))),
        run_criterion(11, || synth().and_then(|_| criterion_11(&data_dir))),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
