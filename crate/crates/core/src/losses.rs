//! Domain-class alignment losses and their lower bounds.
//!
//! For a sample `z` of pair `(d_i, c_i)` every other pair `k` with data is a
//! destination with scaled distance `s_k = w_k · dist(z, μ_k)`. The weight
//! `w_k` is 1 for the plain alignment loss, `1/N_src` for the balanced loss
//! and `(N_k/N_src)^ν / N_src` for the calibrated loss. Same-class pairs in
//! other domains are positives; the per-sample loss is
//!
//! ```text
//! ℓ = mean_{p ∈ pos} s_p + log Σ_{k ≠ own} exp(−s_k)
//! ```
//!
//! which is the average negative log-softmin probability of the positives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::DomainClassKey;
use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, log_sum_exp, softmax, sub, DEFAULT_EPS_REL};
use crate::stats::{build_graph, group, transfer_stats, Centroids, Metric, StatsStore, TransferStats};

/// Floor for distances appearing in gradient denominators.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Da,
    Boda,
    CalibratedBoda,
    BodaM,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] =
        [LossVariant::Da, LossVariant::Boda, LossVariant::CalibratedBoda, LossVariant::BodaM];

    pub fn metric(self, eps_rel: f64) -> Metric {
        match self {
            LossVariant::BodaM => Metric::Mahalanobis { eps_rel },
            _ => Metric::Euclid,
        }
    }

    pub fn scaling(self, nu: f64) -> Scaling {
        match self {
            LossVariant::Da => Scaling::Plain,
            LossVariant::Boda => Scaling::Balanced,
            LossVariant::CalibratedBoda | LossVariant::BodaM => Scaling::Calibrated { nu },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Da => "da",
            LossVariant::Boda => "boda",
            LossVariant::CalibratedBoda => "calibrated_boda",
            LossVariant::BodaM => "boda_m",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub nu: f64,
    pub omega: f64,
    pub reduction: Reduction,
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
}

fn default_eps_rel() -> f64 {
    DEFAULT_EPS_REL
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::CalibratedBoda,
            nu: 1.0,
            omega: 0.1,
            reduction: Reduction::Mean,
            eps_rel: DEFAULT_EPS_REL,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.nu.is_finite() && self.nu >= 0.0, "nu must be finite and >= 0");
        ensure!(self.omega.is_finite() && self.omega >= 0.0, "omega must be finite and >= 0");
        ensure!(self.eps_rel.is_finite() && self.eps_rel >= 0.0, "eps_rel must be finite and >= 0");
        Ok(())
    }
}

/// How raw distances are weighted per destination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scaling {
    Plain,
    Balanced,
    Calibrated { nu: f64 },
}

impl Scaling {
    fn weight(self, n_src: usize, n_dst: usize) -> f64 {
        match self {
            Scaling::Plain => 1.0,
            Scaling::Balanced => 1.0 / n_src as f64,
            Scaling::Calibrated { nu } => {
                let lambda = (n_dst as f64 / n_src as f64).powf(nu);
                lambda / n_src as f64
            }
        }
    }
}

/// `d / n_src`.
pub fn balanced_distance(d_raw: f64, n_src: usize) -> Result<f64> {
    ensure!(n_src >= 1, "source count must be positive");
    ensure!(d_raw >= 0.0, "distance must be non-negative, got {d_raw}");
    Ok(d_raw / n_src as f64)
}

/// `λ = (n_dst / n_src)^ν`.
pub fn calibration_coeff(n_src: usize, n_dst: usize, nu: f64) -> Result<f64> {
    ensure!(n_src >= 1 && n_dst >= 1, "calibration needs positive counts");
    Ok((n_dst as f64 / n_src as f64).powf(nu))
}

/// Softmin weights and distance derivatives for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodaGradientDetail {
    /// Destinations, i.e. every pair with statistics except the sample's own.
    pub keys: Vec<DomainClassKey>,
    pub positive: Vec<bool>,
    /// Raw distances `dist(z, μ_k)`.
    pub distances: Vec<f64>,
    /// Per-destination distance weight `w_k`.
    pub weights: Vec<f64>,
    /// Softmin probabilities over the destinations; sums to one.
    pub probs: Vec<f64>,
    /// `∂ℓ/∂dist_k`.
    pub dloss_ddist: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub detail: BodaGradientDetail,
}

/// Per-sample loss and `∂ℓ/∂z`. Returns `Ok(None)` when the sample's class has
/// no pair in another domain (nothing to align with).
pub fn sample_loss(
    z: &[f64],
    key: DomainClassKey,
    centroids: &Centroids,
    scaling: Scaling,
) -> Result<Option<SampleLoss>> {
    let own = centroids
        .index_of(&key)
        .ok_or_else(|| Error::validation(format!("no statistics for sample pair {key}")))?;
    ensure!(
        z.len() == centroids.mus[own].len(),
        "feature has dimension {} but statistics have {}",
        z.len(),
        centroids.mus[own].len()
    );
    let n_src = centroids.counts[own];
    ensure!(n_src >= 1, "pair {key} has zero count");

    let m = centroids.len() - 1;
    let mut keys = Vec::with_capacity(m);
    let mut positive = Vec::with_capacity(m);
    let mut distances = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut diffs = Vec::with_capacity(m);
    for j in (0..centroids.len()).filter(|&j| j != own) {
        let k = centroids.keys[j];
        let diff = sub(z, &centroids.mus[j]);
        let dist = match &centroids.precisions {
            None => diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Some(p) => p[j].quad_form(&diff).max(0.0).sqrt(),
        };
        keys.push(k);
        positive.push(k.class == key.class && k.domain != key.domain);
        distances.push(dist);
        weights.push(scaling.weight(n_src, centroids.counts[j]));
        diffs.push((j, diff));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }

    let neg_scaled: Vec<f64> = distances.iter().zip(&weights).map(|(d, w)| -w * d).collect();
    let lse = log_sum_exp(&neg_scaled);
    let pos_mean = neg_scaled
        .iter()
        .zip(&positive)
        .filter(|(_, &p)| p)
        .map(|(s, _)| -s)
        .sum::<f64>()
        / n_pos as f64;
    let loss = pos_mean + lse;
    let probs = softmax(&neg_scaled);

    let inv_pos = 1.0 / n_pos as f64;
    let dloss_ddist: Vec<f64> = (0..m)
        .map(|k| {
            let ind = if positive[k] { inv_pos } else { 0.0 };
            weights[k] * (ind - probs[k])
        })
        .collect();

    let mut grad = vec![0.0; z.len()];
    for (k, (j, diff)) in diffs.iter().enumerate() {
        let coef = dloss_ddist[k] / distances[k].max(DIST_FLOOR);
        match &centroids.precisions {
            None => axpy(&mut grad, coef, diff),
            Some(p) => axpy(&mut grad, coef, &p[*j].matvec(diff)?),
        }
    }

    Ok(Some(SampleLoss {
        loss,
        grad,
        detail: BodaGradientDetail { keys, positive, distances, weights, probs, dloss_ddist },
    }))
}

/// Batch loss value with the per-sample terms that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub value: f64,
    /// `None` for skipped samples.
    pub per_sample: Vec<Option<f64>>,
    /// Samples whose class exists in only one domain.
    pub skipped: usize,
}

pub fn alignment_loss(
    features: &[Vec<f64>],
    keys: &[DomainClassKey],
    centroids: &Centroids,
    scaling: Scaling,
    reduction: Reduction,
) -> Result<BatchLoss> {
    ensure!(features.len() == keys.len(), "features and keys differ in length");
    let domains: std::collections::BTreeSet<usize> = centroids.keys.iter().map(|k| k.domain).collect();
    ensure!(domains.len() >= 2, "alignment needs statistics from at least 2 domains");
    let per_sample = features
        .iter()
        .zip(keys)
        .map(|(z, k)| Ok(sample_loss(z, *k, centroids, scaling)?.map(|s| s.loss)))
        .collect::<Result<Vec<_>>>()?;
    let skipped = per_sample.iter().filter(|v| v.is_none()).count();
    let total: f64 = per_sample.iter().flatten().sum();
    let used = per_sample.len() - skipped;
    let value = match reduction {
        Reduction::Sum => total,
        Reduction::Mean if used > 0 => total / used as f64,
        Reduction::Mean => 0.0,
    };
    Ok(BatchLoss { value, per_sample, skipped })
}

/// Unbalanced alignment loss: raw distances.
pub fn da_loss(
    features: &[Vec<f64>],
    keys: &[DomainClassKey],
    store: &StatsStore,
    metric: Metric,
    reduction: Reduction,
) -> Result<BatchLoss> {
    let centroids = Centroids::new(store, metric)?;
    alignment_loss(features, keys, &centroids, Scaling::Plain, reduction)
}

/// Balanced alignment loss; with `calibrated` the distances are further
/// weighted by `(N_dst/N_src)^ν`.
pub fn boda_loss(
    features: &[Vec<f64>],
    keys: &[DomainClassKey],
    store: &StatsStore,
    metric: Metric,
    nu: f64,
    calibrated: bool,
    reduction: Reduction,
) -> Result<BatchLoss> {
    let centroids = Centroids::new(store, metric)?;
    let scaling = if calibrated { Scaling::Calibrated { nu } } else { Scaling::Balanced };
    alignment_loss(features, keys, &centroids, scaling, reduction)
}

/// Mahalanobis distance to a pair's mean under its shrunk covariance.
pub fn boda_m_distance(z: &[f64], stats: &crate::stats::FeatureStats, eps_rel: f64) -> Result<f64> {
    ensure!(z.len() == stats.mu.len(), "dimension mismatch");
    let prec = crate::numerics::inverse_shrunk(&stats.sigma, eps_rel)?;
    Ok(prec.quad_form(&sub(z, &stats.mu)).max(0.0).sqrt())
}

/// Gradient of one sample's loss with respect to its feature.
pub fn boda_grad(
    z: &[f64],
    key: DomainClassKey,
    store: &StatsStore,
    metric: Metric,
    nu: f64,
    calibrated: bool,
) -> Result<Option<(Vec<f64>, BodaGradientDetail)>> {
    let centroids = Centroids::new(store, metric)?;
    let scaling = if calibrated { Scaling::Calibrated { nu } } else { Scaling::Balanced };
    Ok(sample_loss(z, key, &centroids, scaling)?.map(|s| (s.grad, s.detail)))
}

/// Cross-entropy `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    ensure!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let lse = log_sum_exp(logits);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

pub fn joint_loss(ce: f64, boda: f64, omega: f64) -> f64 {
    ce + omega * boda
}

fn bound_rhs(alpha: f64, beta: f64, gamma: f64, n_total: usize, nd: usize, nc: usize) -> Result<f64> {
    ensure!(nd > 1 && nc > 1, "bound needs more than one domain and class (got {nd}, {nc})");
    ensure!(n_total > 0, "bound needs at least one sample");
    let (n, d, c) = (n_total as f64, nd as f64, nc as f64);
    let exponent = (c * d / n) * alpha - (c / n) * beta - (c * (d - 1.0) / n) * gamma;
    // log(a + b·e^x) evaluated as a log-sum-exp
    let inner = log_sum_exp(&[(d - 1.0).ln(), (d * (c - 1.0)).ln() + exponent]);
    Ok(n * inner)
}

/// Lower bound on the summed balanced loss in terms of `(α, β, γ)`.
pub fn theorem1_rhs(ts: &TransferStats, n_total: usize, num_domains: usize, num_classes: usize) -> Result<f64> {
    bound_rhs(ts.alpha, ts.beta, ts.gamma, n_total, num_domains, num_classes)
}

/// Lower bound on the summed calibrated loss in terms of the calibrated statistics.
pub fn theorem2_rhs(ts: &TransferStats, n_total: usize, num_domains: usize, num_classes: usize) -> Result<f64> {
    let cal = ts
        .calibrated
        .ok_or_else(|| Error::validation("calibrated statistics were not computed"))?;
    bound_rhs(cal.alpha, cal.beta, cal.gamma, n_total, num_domains, num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub calibrated: bool,
    pub nu: f64,
    pub num_samples: usize,
    pub num_domains: usize,
    pub num_classes: usize,
    /// Every pair in `D × C` has data; the bound is only guaranteed then.
    pub complete_grid: bool,
    pub empirical: f64,
    pub theoretical: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub empirical_per_sample: f64,
    pub theoretical_per_sample: f64,
    pub stats: TransferStats,
}

/// Summed loss over `features` against the bound computed from the same
/// features. Means (and covariances) come from `store`; counts are taken
/// from the feature set itself.
pub fn verify_bound(
    features: &[Vec<f64>],
    keys: &[DomainClassKey],
    store: &StatsStore,
    metric: Metric,
    nu: f64,
    calibrated: bool,
) -> Result<BoundReport> {
    ensure!(features.len() == keys.len(), "features and keys differ in length");
    let groups = group(keys, features);
    let mut entries = BTreeMap::new();
    for (k, v) in &groups {
        let mut s = store
            .get(k)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no statistics for pair {k}")))?;
        s.count = v.len();
        entries.insert(*k, s);
    }
    let local = StatsStore { dim: store.dim, version: store.version, entries };
    let nd = local.domains().len();
    let nc = local.classes().len();
    ensure!(nd > 1 && nc > 1, "bound needs at least 2 domains and 2 classes with data");

    let loss = boda_loss(features, keys, &local, metric, nu, calibrated, Reduction::Sum)?;
    let graph = build_graph(&local, &groups, metric)?;
    let stats = transfer_stats(&graph, Some(nu), &local.counts())?;
    let n = features.len();
    let theoretical = if calibrated {
        theorem2_rhs(&stats, n, nd, nc)?
    } else {
        theorem1_rhs(&stats, n, nd, nc)?
    };
    let empirical = loss.value;
    let gap = empirical - theoretical;
    Ok(BoundReport {
        calibrated,
        nu,
        num_samples: n,
        num_domains: nd,
        num_classes: nc,
        complete_grid: local.len() == nd * nc,
        empirical,
        theoretical,
        gap,
        relative_gap: if empirical != 0.0 { gap / empirical.abs() } else { 0.0 },
        empirical_per_sample: empirical / n as f64,
        theoretical_per_sample: theoretical / n as f64,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mat, Rng};
    use crate::stats::{compute_stats, FeatureStats};

    fn k(d: usize, c: usize) -> DomainClassKey {
        DomainClassKey::new(d, c)
    }

    fn store_from(mus: &[(DomainClassKey, Vec<f64>, usize)]) -> StatsStore {
        let dim = mus[0].1.len();
        let entries = mus
            .iter()
            .map(|(key, mu, n)| {
                (*key, FeatureStats { key: *key, mu: mu.clone(), sigma: Mat::identity(dim), count: *n })
            })
            .collect();
        StatsStore { dim, version: 0, entries }
    }

    fn unit_square_store(counts: [usize; 4]) -> StatsStore {
        store_from(&[
            (k(0, 0), vec![0.0, 0.0], counts[0]),
            (k(0, 1), vec![0.0, 1.0], counts[1]),
            (k(1, 0), vec![1.0, 0.0], counts[2]),
            (k(1, 1), vec![1.0, 1.0], counts[3]),
        ])
    }

    /// Literal evaluation of the calibrated loss: nested loops, naive exp.
    fn oracle_loss(z: &[f64], key: DomainClassKey, store: &StatsStore, nu: f64, balanced: bool) -> f64 {
        let dist = |mu: &[f64]| z.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let n_src = store.get(&key).unwrap().count as f64;
        let scaled = |dst: &FeatureStats| {
            if balanced {
                (dst.count as f64 / n_src).powf(nu) * dist(&dst.mu) / n_src
            } else {
                dist(&dst.mu)
            }
        };
        let denom: f64 = store
            .entries
            .values()
            .filter(|s| s.key != key)
            .map(|s| (-scaled(s)).exp())
            .sum();
        let positives: Vec<&FeatureStats> = store
            .entries
            .values()
            .filter(|s| s.key.class == key.class && s.key.domain != key.domain)
            .collect();
        -positives.iter().map(|p| ((-scaled(p)).exp() / denom).ln()).sum::<f64>() / positives.len() as f64
    }

    #[test]
    fn balanced_distance_cases() {
        assert_eq!(balanced_distance(3.0, 1).unwrap(), 3.0);
        assert_eq!(balanced_distance(3.0, 3).unwrap(), 1.0);
        assert_eq!(balanced_distance(0.0, 17).unwrap(), 0.0);
        assert!(balanced_distance(1.0, 0).is_err());
    }

    #[test]
    fn calibration_coeff_cases() {
        assert_eq!(calibration_coeff(100, 25, 1.0).unwrap(), 0.25);
        assert_eq!(calibration_coeff(7, 300, 0.0).unwrap(), 1.0);
        for (a, b, nu) in [(3, 50, 1.0), (12, 5, 0.5), (1, 1000, 1.7)] {
            let prod = calibration_coeff(a, b, nu).unwrap() * calibration_coeff(b, a, nu).unwrap();
            assert!((prod - 1.0).abs() < 1e-12);
        }
        assert!(calibration_coeff(0, 3, 1.0).is_err());
    }

    #[test]
    fn da_sample_at_own_centroid() {
        let store = unit_square_store([1, 1, 1, 1]);
        let loss = da_loss(&[vec![0.0, 0.0]], &[k(0, 0)], &store, Metric::Euclid, Reduction::Sum).unwrap();
        // −log(e^{−1} / (e^{−1} + e^{−1} + e^{−√2}))
        let closed = (2.0 + (1.0 - 2f64.sqrt()).exp()).ln();
        assert!((loss.value - closed).abs() < 1e-12);
        assert!((loss.value - 0.978_649_3).abs() < 1e-6);
    }

    #[test]
    fn equal_distances_give_log_of_destination_count() {
        // three destinations on a circle of radius 2 around the sample
        for r in [0.5, 2.0, 40.0] {
            let store = store_from(&[
                (k(0, 0), vec![0.0, 0.0], 5),
                (k(1, 0), vec![r, 0.0], 5),
                (k(0, 1), vec![-r, 0.0], 5),
                (k(1, 1), vec![0.0, r], 5),
            ]);
            let l = da_loss(&[vec![0.0, 0.0]], &[k(0, 0)], &store, Metric::Euclid, Reduction::Sum).unwrap();
            assert!((l.value - 3f64.ln()).abs() < 1e-12);
        }
    }

    fn random_store(rng: &mut Rng, nd: usize, nc: usize, h: usize, max_count: usize) -> StatsStore {
        let mut entries = BTreeMap::new();
        for d in 0..nd {
            for c in 0..nc {
                let mu: Vec<f64> = (0..h).map(|_| 2.0 * rng.next_gaussian()).collect();
                let mut b = Mat::zeros(h, h);
                b.data.iter_mut().for_each(|v| *v = rng.next_gaussian());
                let mut sigma = b.matmul(&b.transpose()).unwrap();
                sigma.scale(1.0 / h as f64);
                let count = 1 + rng.below(max_count);
                entries.insert(k(d, c), FeatureStats { key: k(d, c), mu, sigma, count });
            }
        }
        StatsStore { dim: h, version: 0, entries }
    }

    #[test]
    fn da_per_sample_floor() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let nd = 2 + rng.below(2);
            let nc = 2 + rng.below(3);
            let store = random_store(&mut rng, nd, nc, 3, 10);
            let key = k(rng.below(nd), rng.below(nc));
            let z: Vec<f64> = (0..3).map(|_| 2.0 * rng.next_gaussian()).collect();
            let c = Centroids::new(&store, Metric::Euclid).unwrap();
            let s = sample_loss(&z, key, &c, Scaling::Plain).unwrap().unwrap();
            let det = &s.detail;
            let pos: Vec<f64> = det.distances.iter().zip(&det.positive).filter(|(_, p)| **p).map(|(d, _)| *d).collect();
            let neg: Vec<f64> = det.distances.iter().zip(&det.positive).filter(|(_, p)| !**p).map(|(d, _)| *d).collect();
            let pos_mean = pos.iter().sum::<f64>() / pos.len() as f64;
            let neg_max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let floor = ((nd - 1) as f64 + (nd * (nc - 1)) as f64 * (pos_mean - neg_max).exp()).ln();
            assert!(s.loss >= floor - 1e-12);
            assert!(s.loss > 0.0);
        }
    }

    #[test]
    fn boda_matches_literal_evaluation() {
        let store = unit_square_store([4, 9, 2, 30]);
        let zs = vec![vec![0.2, -0.1], vec![0.1, 1.3], vec![0.8, 0.4], vec![1.5, 0.7]];
        let keys = vec![k(0, 0), k(0, 1), k(1, 0), k(1, 1)];
        for (nu, calibrated) in [(1.0, true), (0.5, true), (0.0, false)] {
            let got = boda_loss(&zs, &keys, &store, Metric::Euclid, nu, calibrated, Reduction::Sum).unwrap();
            let nu_eff = if calibrated { nu } else { 0.0 };
            let want: f64 = zs.iter().zip(&keys).map(|(z, key)| oracle_loss(z, *key, &store, nu_eff, true)).sum();
            assert!((got.value - want).abs() < 1e-12, "{} vs {}", got.value, want);
        }
        let da = da_loss(&zs, &keys, &store, Metric::Euclid, Reduction::Sum).unwrap();
        let want: f64 = zs.iter().zip(&keys).map(|(z, key)| oracle_loss(z, *key, &store, 0.0, false)).sum();
        assert!((da.value - want).abs() < 1e-12);
    }

    #[test]
    fn unit_counts_reduce_to_da() {
        let mut rng = Rng::new(5);
        let store = random_store(&mut rng, 3, 4, 4, 1);
        let zs: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.next_gaussian()).collect()).collect();
        let keys: Vec<_> = (0..12).map(|i| k(i % 3, i % 4)).collect();
        let da = da_loss(&zs, &keys, &store, Metric::Euclid, Reduction::Mean).unwrap();
        for cal in [false, true] {
            let b = boda_loss(&zs, &keys, &store, Metric::Euclid, 1.0, cal, Reduction::Mean).unwrap();
            assert!((b.value - da.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn nu_zero_is_bitwise_uncalibrated() {
        let mut rng = Rng::new(6);
        let store = random_store(&mut rng, 2, 5, 3, 40);
        let zs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.next_gaussian()).collect()).collect();
        let keys: Vec<_> = (0..10).map(|i| k(i % 2, i % 5)).collect();
        let a = boda_loss(&zs, &keys, &store, Metric::Euclid, 0.0, true, Reduction::Sum).unwrap();
        let b = boda_loss(&zs, &keys, &store, Metric::Euclid, 0.0, false, Reduction::Sum).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn boda_m_identity_covariance_close_to_euclid() {
        let mut rng = Rng::new(8);
        let mut store = random_store(&mut rng, 2, 3, 3, 20);
        for s in store.entries.values_mut() {
            s.sigma = Mat::identity(3);
        }
        let zs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.next_gaussian()).collect()).collect();
        let keys: Vec<_> = (0..6).map(|i| k(i % 2, i % 3)).collect();
        let e = boda_loss(&zs, &keys, &store, Metric::Euclid, 1.0, true, Reduction::Sum).unwrap();
        let m = boda_loss(&zs, &keys, &store, Metric::Mahalanobis { eps_rel: DEFAULT_EPS_REL }, 1.0, true, Reduction::Sum)
            .unwrap();
        assert!(((e.value - m.value) / e.value).abs() < 1e-3);
    }

    #[test]
    fn boda_m_distance_cases() {
        let mk = |sigma: Mat| FeatureStats { key: k(0, 0), mu: vec![1.0, 1.0], sigma, count: 3 };
        let id = mk(Mat::identity(2));
        assert_eq!(boda_m_distance(&[1.0, 1.0], &id, DEFAULT_EPS_REL).unwrap(), 0.0);
        let e = boda_m_distance(&[4.0, -3.0], &id, DEFAULT_EPS_REL).unwrap();
        assert!(((e - 5.0) / 5.0).abs() < 1e-3);
        let diag = mk(Mat::from_diag(&[4.0, 1.0]));
        let d = boda_m_distance(&[3.0, 1.0], &diag, DEFAULT_EPS_REL).unwrap();
        assert!((d - 1.0).abs() < 2e-3, "{d}");
    }

    #[test]
    fn skipped_samples_are_counted() {
        // class 1 only in domain 0
        let store = store_from(&[
            (k(0, 0), vec![0.0, 0.0], 2),
            (k(1, 0), vec![1.0, 0.0], 2),
            (k(0, 1), vec![0.0, 1.0], 2),
        ]);
        let zs = vec![vec![0.1, 0.0], vec![0.0, 0.9]];
        let keys = vec![k(0, 0), k(0, 1)];
        let l = boda_loss(&zs, &keys, &store, Metric::Euclid, 1.0, true, Reduction::Mean).unwrap();
        assert_eq!(l.skipped, 1);
        assert!(l.per_sample[1].is_none());
        assert_eq!(l.value, l.per_sample[0].unwrap());
    }

    #[test]
    fn missing_sample_pair_rejected() {
        let store = unit_square_store([1, 1, 1, 1]);
        let r = da_loss(&[vec![0.0, 0.0]], &[k(2, 0)], &store, Metric::Euclid, Reduction::Sum);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn gradient_sign_structure_two_domains() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let store = random_store(&mut rng, 2, 4, 3, 30);
            let z: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
            let (_, det) = boda_grad(&z, k(1, 2), &store, Metric::Euclid, 1.0, true).unwrap().unwrap();
            assert!((det.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(det.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            for (g, pos) in det.dloss_ddist.iter().zip(&det.positive) {
                if *pos {
                    assert!(*g >= 0.0);
                } else {
                    assert!(*g <= 0.0);
                }
            }
        }
    }

    #[test]
    fn negative_gradient_magnitude_tracks_probability() {
        let mut rng = Rng::new(13);
        let store = random_store(&mut rng, 3, 4, 3, 30);
        let z: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        for calibrated in [false, true] {
            let (_, det) = boda_grad(&z, k(0, 1), &store, Metric::Euclid, 1.0, calibrated).unwrap().unwrap();
            let mut negs: Vec<(f64, f64)> = (0..det.keys.len())
                .filter(|&i| !det.positive[i])
                .map(|i| (det.probs[i], det.dloss_ddist[i].abs() / det.weights[i]))
                .collect();
            negs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in negs.windows(2) {
                if w[1].0 > w[0].0 {
                    assert!(w[1].1 > w[0].1);
                }
            }
        }
    }

    #[test]
    fn ce_cases() {
        let (l, g) = ce_loss(&[0.0; 10], 3).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let mut logits = vec![0.0; 10];
        logits[4] = 20.0;
        let (l, _) = ce_loss(&logits, 4).unwrap();
        assert!(l > 0.0 && l < 2e-8);
        let (_, g) = ce_loss(&[0.3, -1.2, 2.5], 1).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(ce_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn joint_cases() {
        assert_eq!(joint_loss(1.7, 5.0, 0.0), 1.7);
        assert!((joint_loss(2.0, 3.0, 0.1) - 2.3).abs() < 1e-15);
        let (a, b) = (joint_loss(1.0, 2.0, 0.3), joint_loss(1.0, 2.0, 0.6));
        assert!(((b - 1.0) - 2.0 * (a - 1.0)).abs() < 1e-15);
    }

    fn plain_stats(alpha: f64, beta: f64, gamma: f64) -> TransferStats {
        TransferStats { alpha, beta, gamma, calibrated: None }
    }

    #[test]
    fn theorem1_unit_square_value() {
        let v = theorem1_rhs(&plain_stats(1.0, 1.0, 2f64.sqrt()), 4, 2, 2).unwrap();
        // 4·ln(1 + 2·exp(1 − ½ − ½√2))
        let by_hand = 4.0 * (1.0 + 2.0 * (0.5 - 0.5 * 2f64.sqrt()).exp()).ln();
        assert!((v - by_hand).abs() < 1e-12);
        assert!((v - 3.861_642).abs() < 1e-5);
    }

    #[test]
    fn theorem1_zero_stats_and_monotonicity() {
        let v = theorem1_rhs(&plain_stats(0.0, 0.0, 0.0), 50, 3, 4).unwrap();
        assert!((v - 50.0 * 11f64.ln()).abs() < 1e-10);
        let base = theorem1_rhs(&plain_stats(1.0, 1.0, 1.0), 10, 2, 3).unwrap();
        assert!(theorem1_rhs(&plain_stats(1.5, 1.0, 1.0), 10, 2, 3).unwrap() > base);
        assert!(theorem1_rhs(&plain_stats(1.0, 1.5, 1.0), 10, 2, 3).unwrap() < base);
        assert!(theorem1_rhs(&plain_stats(1.0, 1.0, 1.5), 10, 2, 3).unwrap() < base);
        assert!(theorem1_rhs(&plain_stats(1.0, 1.0, 1.0), 10, 1, 3).is_err());
        assert!(theorem1_rhs(&plain_stats(1.0, 1.0, 1.0), 10, 2, 1).is_err());
    }

    #[test]
    fn theorem2_reduces_to_theorem1() {
        let ts = TransferStats {
            alpha: 0.7,
            beta: 2.0,
            gamma: 2.5,
            calibrated: Some(crate::stats::CalibratedStats { nu: 0.0, alpha: 0.7, beta: 2.0, gamma: 2.5 }),
        };
        assert_eq!(theorem1_rhs(&ts, 30, 2, 5).unwrap(), theorem2_rhs(&ts, 30, 2, 5).unwrap());
        assert!(theorem2_rhs(&plain_stats(1.0, 1.0, 1.0), 30, 2, 5).is_err());
    }

    #[test]
    fn bound_holds_on_random_features() {
        let mut rng = Rng::new(21);
        for trial in 0..40 {
            let (nd, nc, h) = (2 + trial % 3, 2 + trial % 4, 2 + trial % 5);
            let mut zs = Vec::new();
            let mut keys = Vec::new();
            for d in 0..nd {
                for c in 0..nc {
                    for _ in 0..(1 + rng.below(12)) {
                        zs.push((0..h).map(|_| rng.next_gaussian() + c as f64).collect::<Vec<f64>>());
                        keys.push(k(d, c));
                    }
                }
            }
            let store = compute_stats(&group(&keys, &zs)).unwrap();
            for calibrated in [false, true] {
                let r = verify_bound(&zs, &keys, &store, Metric::Euclid, 1.0, calibrated).unwrap();
                assert!(r.complete_grid);
                assert!(r.gap >= -1e-9, "gap {}", r.gap);
            }
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / crate::numerics::norm(a).max(crate::numerics::norm(b)).max(1e-10)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(44);
        for trial in 0..40 {
            let (nd, nc, h) = (2 + trial % 2, 2 + trial % 3, 2 + trial % 5);
            let store = random_store(&mut rng, nd, nc, h, 50);
            let key = k(rng.below(nd), rng.below(nc));
            let z: Vec<f64> = (0..h).map(|_| 2.0 * rng.next_gaussian()).collect();
            for variant in LossVariant::ALL {
                let c = Centroids::new(&store, variant.metric(DEFAULT_EPS_REL)).unwrap();
                let scaling = variant.scaling(1.0);
                let f = |z: &[f64]| sample_loss(z, key, &c, scaling).unwrap().unwrap().loss;
                let analytic = sample_loss(&z, key, &c, scaling).unwrap().unwrap().grad;
                let h_fd = 1e-5;
                let numeric: Vec<f64> = (0..h)
                    .map(|i| {
                        let (mut zp, mut zm) = (z.clone(), z.clone());
                        zp[i] += h_fd;
                        zm[i] -= h_fd;
                        (f(&zp) - f(&zm)) / (2.0 * h_fd)
                    })
                    .collect();
                let e = rel_err(&analytic, &numeric);
                assert!(e < 1e-6, "{variant:?} trial {trial}: {e}");
            }
        }
    }
}
