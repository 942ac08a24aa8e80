//! Finite-difference checks of the analytic gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::DomainClassKey;
use crate::error::{ensure, Result};
use crate::losses::{ce_loss, sample_loss, LossVariant};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::{axpy, norm, sym_eig, Mat, Rng, DEFAULT_EPS_REL};
use crate::stats::{compute_stats, group, Centroids, FeatureStats, StatsStore};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-10)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-10)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Random statistics over a full `nd × nc` grid with SPD covariances.
pub fn random_store(rng: &mut Rng, nd: usize, nc: usize, dim: usize, max_count: usize) -> StatsStore {
    let mut entries = BTreeMap::new();
    for d in 0..nd {
        for c in 0..nc {
            let key = DomainClassKey::new(d, c);
            let mu = (0..dim).map(|_| 2.0 * rng.next_gaussian()).collect();
            let mut b = Mat::zeros(dim, dim);
            b.data.iter_mut().for_each(|v| *v = rng.next_gaussian());
            let mut sigma = b.matmul(&b.transpose()).expect("square");
            sigma.scale(1.0 / dim as f64);
            entries.insert(key, FeatureStats { key, mu, sigma, count: 1 + rng.below(max_count) });
        }
    }
    StatsStore { dim, version: 0, entries }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    /// Largest relative error per loss variant.
    pub max_rel_error: BTreeMap<String, f64>,
    /// Largest relative error of the full-model joint-loss parameter gradient.
    pub model_max_rel_error: f64,
    pub passed: bool,
}

/// Feature gradients of every loss variant on `instances` random problems,
/// plus `model_instances` full-model checks.
pub fn run(seed: u64, instances: usize, model_instances: usize) -> Result<GradcheckReport> {
    ensure!(instances > 0, "gradcheck needs at least one instance");
    let mut rng = Rng::new(seed);
    let mut worst: BTreeMap<String, f64> = LossVariant::ALL.iter().map(|v| (v.name().to_string(), 0.0)).collect();
    for _ in 0..instances {
        let nd = 2 + rng.below(3);
        let nc = 2 + rng.below(5);
        let dim = 2 + rng.below(7);
        let store = random_store(&mut rng, nd, nc, dim, 50);
        let key = DomainClassKey::new(rng.below(nd), rng.below(nc));
        let z: Vec<f64> = (0..dim).map(|_| 2.0 * rng.next_gaussian()).collect();
        let nu = [0.5, 1.0, 1.5][rng.below(3)];
        for variant in LossVariant::ALL {
            let centroids = Centroids::new(&store, variant.metric(DEFAULT_EPS_REL))?;
            let scaling = variant.scaling(nu);
            let analytic = sample_loss(&z, key, &centroids, scaling)?.expect("full grid has positives").grad;
            let numeric = numeric_gradient(&z, FD_STEP, |p| {
                sample_loss(p, key, &centroids, scaling).expect("valid").expect("positives").loss
            });
            let e = relative_error(&analytic, &numeric);
            let w = worst.get_mut(variant.name()).expect("all variants present");
            *w = w.max(e);
        }
    }
    let mut model_worst = 0.0f64;
    for _ in 0..model_instances {
        for variant in LossVariant::ALL {
            model_worst = model_worst.max(model_gradcheck(rng.next_u64(), variant)?);
        }
    }
    let passed = worst.values().all(|&e| e <= TOLERANCE) && model_worst <= TOLERANCE;
    Ok(GradcheckReport { seed, instances, tolerance: TOLERANCE, max_rel_error: worst, model_max_rel_error: model_worst, passed })
}

/// Mean CE plus `omega` times the mean alignment loss, with statistics held fixed.
fn joint_objective(p: &ModelParams, x: &Mat, keys: &[DomainClassKey], c: &Centroids, variant: LossVariant, omega: f64) -> f64 {
    let f = p.forward_batch(x).expect("shapes checked");
    let mut ce = 0.0;
    let mut align = 0.0;
    let mut used = 0usize;
    for (i, k) in keys.iter().enumerate() {
        ce += ce_loss(f.logits.row(i), k.class).expect("label in range").0;
        if let Some(s) = sample_loss(f.z().row(i), *k, c, variant.scaling(1.0)).expect("valid") {
            align += s.loss;
            used += 1;
        }
    }
    ce / keys.len() as f64 + omega * align / used.max(1) as f64
}

const KINK_MARGIN: f64 = 1e-4;

const MIN_CONDITIONING: f64 = 1e-3;

/// Smallest ratio of least to largest covariance eigenvalue over all pairs.
fn worst_conditioning(store: &StatsStore) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for s in store.entries.values() {
        let eig = sym_eig(&s.sigma, 1e-12 * (1.0 + s.sigma.max_abs()))?;
        let max = eig.values.iter().cloned().fold(0.0, f64::max);
        let min = eig.values.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.min(if max > 0.0 { min / max } else { 0.0 });
    }
    Ok(worst)
}

/// Smallest |pre-activation| over all ReLU units and samples.
fn min_hidden_margin(p: &ModelParams, x: &Mat) -> Result<f64> {
    let f = p.forward_batch(x)?;
    let mut m = f64::INFINITY;
    for i in 0..p.encoder_layers() - 1 {
        let pre = f.inputs[i].matmul(&p.layers[i].transpose())?;
        for r in 0..pre.rows {
            for (v, b) in pre.row(r).iter().zip(&p.biases[i]) {
                m = m.min((v + b).abs());
            }
        }
    }
    Ok(m)
}

/// Relative error of the backpropagated joint-loss gradient against central
/// differences over every parameter of a small two-hidden-layer MLP.
pub fn model_gradcheck(seed: u64, variant: LossVariant) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (input, classes, repr) = (6, 3, 4);
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for d in 0..2 {
        for c in 0..classes {
            // more samples than feature dimensions keeps every covariance full rank
            for _ in 0..(2 * repr + rng.below(3)) {
                rows.push((0..input).map(|_| rng.next_gaussian() + c as f64).collect::<Vec<f64>>());
                keys.push(DomainClassKey::new(d, c));
            }
        }
    }
    let x = Mat::from_rows(&rows)?;
    // Central differences are only meaningful where the objective is smooth
    // at the step scale: redraw the model until no hidden pre-activation is
    // near a ReLU kink and every pair's feature covariance is well conditioned.
    let omega = 0.1;
    let dims = ModelDims::new(input, vec![8, 8], repr, classes);
    let (p, store) = loop {
        let mut p = ModelParams::init(&dims, rng.next_u64())?;
        p.biases.iter_mut().flatten().for_each(|b| *b = 0.1 * rng.next_gaussian());
        if min_hidden_margin(&p, &x)? <= KINK_MARGIN {
            continue;
        }
        let z = p.encode(&x)?;
        let zs: Vec<Vec<f64>> = (0..z.rows).map(|i| z.row(i).to_vec()).collect();
        let store = compute_stats(&group(&keys, &zs))?;
        if worst_conditioning(&store)? < MIN_CONDITIONING {
            continue;
        }
        break (p, store);
    };
    let centroids = Centroids::new(&store, variant.metric(DEFAULT_EPS_REL))?;

    let f = p.forward_batch(&x)?;
    let n = keys.len();
    let mut grad_z = Mat::zeros(n, repr);
    let mut grad_logits = Mat::zeros(n, classes);
    let terms: Vec<_> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| sample_loss(f.z().row(i), *k, &centroids, variant.scaling(1.0)))
        .collect::<Result<_>>()?;
    let used = terms.iter().flatten().count().max(1);
    for (i, k) in keys.iter().enumerate() {
        let (_, g) = ce_loss(f.logits.row(i), k.class)?;
        axpy(grad_logits.row_mut(i), 1.0 / n as f64, &g);
        if let Some(s) = &terms[i] {
            axpy(grad_z.row_mut(i), omega / used as f64, &s.grad);
        }
    }
    let analytic = p.backward(&f, &grad_z, &grad_logits)?.flat();

    let mut q = p.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for t in 0..2 * q.layers.len() {
        let current: Vec<f64> = q.tensors_mut()[t].to_vec();
        let g = numeric_gradient(&current, FD_STEP, |probe| {
            q.tensors_mut()[t].copy_from_slice(probe);
            joint_objective(&q, &x, &keys, &centroids, variant, omega)
        });
        q.tensors_mut()[t].copy_from_slice(&current);
        numeric.extend(g);
    }
    Ok(relative_error(&analytic, &numeric))
}
