//! Central finite-difference checks for every trainable head.

use rand::Rng as _;
use ssos_core::anomaly::{anomaly_loss_logits, AnomalyHead};
use ssos_core::flow::CouplingFlow;
use ssos_core::nn::{Activation, DenseNet};
use ssos_core::rng::{seeded, Rng};
use ssos_core::upc::pcls_loss;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn randomize(params: Vec<(String, &mut Vec<f64>)>, rng: &mut Rng, scale: f64) {
    for (_, p) in params {
        p.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn randvec(n: usize, rng: &mut Rng, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Compares flattened analytic gradients of `model`'s parameters with
/// central differences of `loss`.
fn check_params<M: Clone>(
    model: &M,
    tensors_mut: impl Fn(&mut M) -> Vec<(String, &mut Vec<f64>)>,
    analytic: &[Vec<f64>],
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let n_tensors = tensors_mut(&mut model.clone()).len();
    assert_eq!(n_tensors, analytic.len());
    for t in 0..n_tensors {
        for j in 0..analytic[t].len() {
            let mut plus = model.clone();
            tensors_mut(&mut plus)[t].1[j] += STEP;
            let mut minus = model.clone();
            tensors_mut(&mut minus)[t].1[j] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[t][j], numeric));
        }
    }
    worst
}

fn dense_flat(g: &ssos_core::nn::DenseGrads) -> Vec<Vec<f64>> {
    g.weight.iter().zip(&g.bias).flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
}

#[test]
fn shared_head_and_pseudo_classifier() {
    for seed in 0..SEEDS {
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

        let e1 = check_params(&g, |m| m.tensors_mut("g"), &dense_flat(&gg), |m| loss(m, &pcls));
        let e2 = check_params(&pcls, |m| m.tensors_mut("p"), &dense_flat(&gp), |m| loss(&g, m));
        assert!(e1 < TOL && e2 < TOL, "seed {seed}: g {e1:e}, pcls {e2:e}");
    }
}

#[test]
fn sigmoid_layers() {
    for seed in 0..SEEDS {
        let mut rng = seeded(100 + seed);
        let net = DenseNet::mlp(&[3, 4, 2], Activation::Sigmoid, Activation::Sigmoid, &mut rng).unwrap();
        let x = randvec(3, &mut rng, 1.0);
        let up = randvec(2, &mut rng, 1.0);
        let loss = |m: &DenseNet| m.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let (grads, gin) = net.backward(&x, &up).unwrap();
        assert!(check_params(&net, |m| m.tensors_mut("n"), &dense_flat(&grads), loss) < TOL);
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += STEP;
            let mut xm = x.clone();
            xm[i] -= STEP;
            let f = |v: &[f64]| net.forward(v).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            assert!(rel_err(gin[i], (f(&xp) - f(&xm)) / (2.0 * STEP)) < TOL);
        }
    }
}

#[derive(Clone)]
struct Head(AnomalyHead);

fn head_tensors(h: &mut Head) -> Vec<(String, &mut Vec<f64>)> {
    let Head(a) = h;
    let mut t = vec![("w".to_string(), &mut a.weights.w)];
    t.extend(a.phi.net.tensors_mut("phi"));
    t
}

#[test]
fn energy_weights_and_uncertainty_mlp() {
    for seed in 0..SEEDS {
        let mut rng = seeded(200 + seed);
        let k = 4;
        let mut head = Head(AnomalyHead::new(k, 8, &mut rng).unwrap());
        head.0.weights.w = randvec(k, &mut rng, 1.0).iter().map(|v| 1.0 + 0.5 * v).collect();
        let normals: Vec<Vec<f64>> = (0..3).map(|_| randvec(k, &mut rng, 3.0)).collect();
        let outliers: Vec<Vec<f64>> = (0..2).map(|_| randvec(k, &mut rng, 3.0)).collect();
        let loss = |h: &Head, n: &[Vec<f64>], o: &[Vec<f64>]| {
            let a = |v: &Vec<f64>| h.0.forward(v).unwrap().logit;
            anomaly_loss_logits(&n.iter().map(a).collect::<Vec<_>>(), &o.iter().map(a).collect::<Vec<_>>()).unwrap().0
        };

        let fn_: Vec<_> = normals.iter().map(|v| head.0.forward(v).unwrap()).collect();
        let fo: Vec<_> = outliers.iter().map(|v| head.0.forward(v).unwrap()).collect();
        let (_, gn, go) = anomaly_loss_logits(
            &fn_.iter().map(|f| f.logit).collect::<Vec<_>>(),
            &fo.iter().map(|f| f.logit).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut grads = head.0.zero_grads();
        let mut dfs = Vec::new();
        for (f, g) in fn_.iter().zip(&gn).chain(fo.iter().zip(&go)) {
            dfs.push(head.0.backward(f, *g, &mut grads).unwrap());
        }
        let mut analytic = vec![grads.weights.clone()];
        analytic.extend(dense_flat(&grads.phi));
        let e = check_params(&head, head_tensors, &analytic, |h| loss(h, &normals, &outliers));
        assert!(e < TOL, "seed {seed}: {e:e}");

        // gradient with respect to the pseudo-class logits
        for (i, df) in dfs.iter().take(normals.len()).enumerate() {
            for j in 0..k {
                let mut p = normals.clone();
                p[i][j] += STEP;
                let mut m = normals.clone();
                m[i][j] -= STEP;
                let num = (loss(&head, &p, &outliers) - loss(&head, &m, &outliers)) / (2.0 * STEP);
                assert!(rel_err(df[j], num) < TOL, "seed {seed} logit grad");
            }
        }
    }
}

fn random_flow(d: usize, rng: &mut Rng) -> CouplingFlow {
    let mut flow = CouplingFlow::new(d, 4, 6, rng).unwrap();
    randomize(flow.tensors_mut("f"), rng, 0.4);
    flow
}

#[test]
fn flow_nets() {
    for seed in 0..SEEDS {
        let mut rng = seeded(300 + seed);
        let d = 4;
        let flow = random_flow(d, &mut rng);
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
        let e = check_params(&flow, |f| f.tensors_mut("f"), &analytic, |f| f.nll_loss(&batch).unwrap().0);
        assert!(e < TOL, "seed {seed}: {e:e}");

        // input gradient of the log-likelihood terms
        let v = &batch[0];
        let gx = randvec(d, &mut rng, 1.0);
        let gl = 0.7;
        let (_, dv) = flow.backward(v, &gx, gl).unwrap();
        let obj = |x: &[f64]| {
            let (xi, ld) = flow.forward(x).unwrap();
            xi.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>() + gl * ld
        };
        for i in 0..d {
            let mut p = v.clone();
            p[i] += STEP;
            let mut m = v.clone();
            m[i] -= STEP;
            assert!(rel_err(dv[i], (obj(&p) - obj(&m)) / (2.0 * STEP)) < TOL, "seed {seed} input grad");
        }
    }
}
