//! Per-pair feature statistics, the transferability graph and its summary
//! statistics, and a classical-scaling layout of the graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::DomainClassKey;
use crate::error::{ensure, Error, Result};
use crate::numerics::{all_finite, euclidean, inverse_shrunk, sub, sym_eig, Mat};

/// Features grouped by the pair they belong to.
pub type Grouped<'a> = BTreeMap<DomainClassKey, Vec<&'a [f64]>>;

pub fn group<'a>(keys: &[DomainClassKey], features: &'a [Vec<f64>]) -> Grouped<'a> {
    let mut g: Grouped<'a> = BTreeMap::new();
    for (k, f) in keys.iter().zip(features) {
        g.entry(*k).or_default().push(f.as_slice());
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub key: DomainClassKey,
    pub mu: Vec<f64>,
    /// Population covariance (divides by `count`).
    pub sigma: Mat,
    pub count: usize,
}

/// Statistics for every pair that has at least one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsStore {
    pub dim: usize,
    /// Number of refreshes applied since initialization.
    pub version: usize,
    pub entries: BTreeMap<DomainClassKey, FeatureStats>,
}

impl StatsStore {
    pub fn get(&self, key: &DomainClassKey) -> Option<&FeatureStats> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = DomainClassKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> BTreeSet<usize> {
        self.keys().map(|k| k.domain).collect()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.keys().map(|k| k.class).collect()
    }

    pub fn counts(&self) -> BTreeMap<DomainClassKey, usize> {
        self.entries.iter().map(|(k, s)| (*k, s.count)).collect()
    }
}

/// Mean and population covariance per group.
///
/// Within a group the samples are summed in a canonical (lexicographic)
/// order, so the result does not depend on input ordering at all.
pub fn compute_stats(groups: &Grouped<'_>) -> Result<StatsStore> {
    let mut entries = BTreeMap::new();
    let mut dim = None;
    for (key, samples) in groups {
        if samples.is_empty() {
            continue;
        }
        let h = samples[0].len();
        ensure!(h > 0, "features for {key} are empty");
        match dim {
            None => dim = Some(h),
            Some(d) => ensure!(d == h, "feature dimension mismatch: {d} vs {h} at {key}"),
        }
        ensure!(samples.iter().all(|s| s.len() == h), "feature dimension mismatch at {key}");
        ensure!(samples.iter().all(|s| all_finite(s)), "non-finite feature at {key}");

        let mut sorted: Vec<&[f64]> = samples.clone();
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = sorted.len() as f64;
        let mut mu = vec![0.0; h];
        for s in &sorted {
            for (m, v) in mu.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut sigma = Mat::zeros(h, h);
        for s in &sorted {
            let c = sub(s, &mu);
            for i in 0..h {
                for j in i..h {
                    sigma[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..h {
            for j in i..h {
                let v = sigma[(i, j)] / n;
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        entries.insert(*key, FeatureStats { key: *key, mu, sigma, count: samples.len() });
    }
    Ok(StatsStore { dim: dim.unwrap_or(0), version: 0, entries })
}

/// Exponential merge of `prev` towards `current`:
/// `μ ← α·μ_prev + (1−α)·μ_cur`, same for `Σ`; counts come from `current`.
/// Keys only in `current` are inserted as-is, keys only in `prev` are kept.
pub fn momentum_update(prev: &StatsStore, current: &StatsStore, alpha_m: f64) -> Result<StatsStore> {
    ensure!((0.0..=1.0).contains(&alpha_m), "alpha_m must lie in [0, 1], got {alpha_m}");
    ensure!(
        prev.is_empty() || current.is_empty() || prev.dim == current.dim,
        "statistics dimension mismatch: {} vs {}",
        prev.dim,
        current.dim
    );
    let mut entries = prev.entries.clone();
    for (key, cur) in &current.entries {
        let merged = match prev.entries.get(key) {
            None => cur.clone(),
            Some(p) => {
                let mu = p
                    .mu
                    .iter()
                    .zip(&cur.mu)
                    .map(|(a, b)| alpha_m * a + (1.0 - alpha_m) * b)
                    .collect();
                let data = p
                    .sigma
                    .data
                    .iter()
                    .zip(&cur.sigma.data)
                    .map(|(a, b)| alpha_m * a + (1.0 - alpha_m) * b)
                    .collect();
                FeatureStats {
                    key: *key,
                    mu,
                    sigma: Mat { rows: cur.sigma.rows, cols: cur.sigma.cols, data },
                    count: cur.count,
                }
            }
        };
        entries.insert(*key, merged);
    }
    let dim = if current.is_empty() { prev.dim } else { current.dim };
    Ok(StatsStore { dim, version: prev.version + 1, entries })
}

/// Distance used for transferability and the alignment losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclid,
    /// `√((z−μ)ᵀ (Σ+εI)⁻¹ (z−μ))` with the destination pair's covariance.
    Mahalanobis { eps_rel: f64 },
}

/// A metric bound to one destination.
#[derive(Clone, Copy, Debug)]
pub enum Distance<'a> {
    Euclid,
    Mahalanobis(&'a Mat),
}

impl Distance<'_> {
    pub fn eval(&self, z: &[f64], mu: &[f64]) -> f64 {
        match self {
            Distance::Euclid => euclidean(z, mu),
            Distance::Mahalanobis(prec) => prec.quad_form(&sub(z, mu)).max(0.0).sqrt(),
        }
    }
}

/// Destination centroids in a fixed order, with precision matrices when the
/// metric needs them. Built once per statistics refresh.
#[derive(Clone, Debug)]
pub struct Centroids {
    pub keys: Vec<DomainClassKey>,
    pub mus: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub precisions: Option<Vec<Mat>>,
    index: BTreeMap<DomainClassKey, usize>,
}

impl Centroids {
    pub fn new(store: &StatsStore, metric: Metric) -> Result<Self> {
        let keys: Vec<DomainClassKey> = store.keys().collect();
        let mus = store.entries.values().map(|s| s.mu.clone()).collect();
        let counts = store.entries.values().map(|s| s.count).collect();
        let precisions = match metric {
            Metric::Euclid => None,
            Metric::Mahalanobis { eps_rel } => Some(
                store
                    .entries
                    .values()
                    .map(|s| inverse_shrunk(&s.sigma, eps_rel))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Ok(Centroids { keys, mus, counts, precisions, index })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &DomainClassKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn distance(&self, j: usize) -> Distance<'_> {
        match &self.precisions {
            None => Distance::Euclid,
            Some(p) => Distance::Mahalanobis(&p[j]),
        }
    }
}

/// Mean distance from the source samples to `mu_dst`.
pub fn transferability(src: &[&[f64]], mu_dst: &[f64], metric: Distance<'_>) -> Result<f64> {
    ensure!(!src.is_empty(), "transferability needs at least one source sample");
    ensure!(
        src.iter().all(|s| s.len() == mu_dst.len()),
        "source features and destination mean differ in dimension"
    );
    if let Distance::Mahalanobis(p) = metric {
        ensure!(p.rows == mu_dst.len() && p.is_square(), "precision matrix has wrong shape");
    }
    Ok(src.iter().map(|z| metric.eval(z, mu_dst)).sum::<f64>() / src.len() as f64)
}

/// Directed transferability between every pair with data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityGraph {
    /// Domain-major order.
    pub keys: Vec<DomainClassKey>,
    /// `weights[(i, j)] = trans(keys[i] → keys[j])`.
    pub weights: Mat,
}

impl TransferabilityGraph {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let keys: Vec<[usize; 2]> = self.keys.iter().map(|k| [k.domain, k.class]).collect();
        serde_json::json!({ "keys": keys, "weights": self.weights.data })
    }
}

pub fn build_graph(store: &StatsStore, groups: &Grouped<'_>, metric: Metric) -> Result<TransferabilityGraph> {
    let keys: Vec<DomainClassKey> =
        groups.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| *k).collect();
    ensure!(!keys.is_empty(), "no samples to build a transferability graph from");
    let centroids = Centroids::new(store, metric)?;
    let cols: Vec<usize> = keys
        .iter()
        .map(|k| {
            centroids
                .index_of(k)
                .ok_or_else(|| Error::validation(format!("no statistics for destination {k}")))
        })
        .collect::<Result<_>>()?;
    let n = keys.len();
    let mut weights = Mat::zeros(n, n);
    for (i, src_key) in keys.iter().enumerate() {
        let src = &groups[src_key];
        for (j, &cj) in cols.iter().enumerate() {
            weights[(i, j)] = transferability(src, &centroids.mus[cj], centroids.distance(cj))?;
        }
    }
    Ok(TransferabilityGraph { keys, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedStats {
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Same class, different domains.
    pub alpha: f64,
    /// Same domain, different classes.
    pub beta: f64,
    /// Different domain and class.
    pub gamma: f64,
    pub calibrated: Option<CalibratedStats>,
}

impl TransferStats {
    /// `(β+γ) − α`: large when classes separate and domains align.
    pub fn separation_score(&self) -> f64 {
        self.beta + self.gamma - self.alpha
    }
}

/// Mean over pairs of the average Euclidean distance from a pair's samples
/// to its own mean. Used to put models with different feature scales on a
/// common footing.
pub fn within_spread(groups: &Grouped<'_>, store: &StatsStore) -> Result<f64> {
    ensure!(!groups.is_empty(), "no groups");
    let mut total = 0.0;
    for (k, v) in groups {
        let mu = &store
            .get(k)
            .ok_or_else(|| Error::validation(format!("no statistics for pair {k}")))?
            .mu;
        total += v.iter().map(|z| euclidean(z, mu)).sum::<f64>() / v.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// `(α, β, γ)` as plain averages over ordered pairs, and the λ-weighted
/// version when `nu` is given (`λ = (N_dst/N_src)^ν`). Self-loops and pairs
/// missing from the graph never contribute.
pub fn transfer_stats(
    graph: &TransferabilityGraph,
    nu: Option<f64>,
    counts: &BTreeMap<DomainClassKey, usize>,
) -> Result<TransferStats> {
    let domains: BTreeSet<usize> = graph.keys.iter().map(|k| k.domain).collect();
    let classes: BTreeSet<usize> = graph.keys.iter().map(|k| k.class).collect();
    ensure!(
        domains.len() >= 2 && classes.len() >= 2,
        "transferability statistics need at least 2 domains and 2 classes with data (got {} and {})",
        domains.len(),
        classes.len()
    );
    if let Some(nu) = nu {
        ensure!(nu.is_finite() && nu >= 0.0, "nu must be finite and >= 0, got {nu}");
    }
    let n: Vec<f64> = graph
        .keys
        .iter()
        .map(|k| match counts.get(k) {
            Some(&c) if c > 0 => Ok(c as f64),
            _ => Err(Error::validation(format!("no positive training count for {k}"))),
        })
        .collect::<Result<_>>()?;

    let accumulate = |nu: f64| -> Result<[f64; 3]> {
        let mut sums = [0.0f64; 3];
        let mut cnt = [0usize; 3];
        for (i, ki) in graph.keys.iter().enumerate() {
            for (j, kj) in graph.keys.iter().enumerate() {
                let slot = match (ki.domain == kj.domain, ki.class == kj.class) {
                    (false, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (true, true) => continue,
                };
                let lambda = (n[j] / n[i]).powf(nu);
                sums[slot] += lambda * graph.weights[(i, j)];
                cnt[slot] += 1;
            }
        }
        for (name, c) in ["alpha", "beta", "gamma"].iter().zip(cnt) {
            ensure!(c > 0, "no pair combinations available for {name}");
        }
        Ok([sums[0] / cnt[0] as f64, sums[1] / cnt[1] as f64, sums[2] / cnt[2] as f64])
    };

    let [alpha, beta, gamma] = accumulate(0.0)?;
    let calibrated = match nu {
        None => None,
        Some(nu) => {
            let [a, b, g] = accumulate(nu)?;
            Some(CalibratedStats { nu, alpha: a, beta: b, gamma: g })
        }
    };
    Ok(TransferStats { alpha, beta, gamma, calibrated })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdsPoint {
    pub key: DomainClassKey,
    pub x: f64,
    pub y: f64,
}

/// Classical multidimensional scaling of the symmetrized graph into 2-D.
pub fn mds_2d(graph: &TransferabilityGraph) -> Result<Vec<MdsPoint>> {
    let n = graph.len();
    ensure!(n >= 2, "MDS needs at least 2 keys, got {n}");
    let w = &graph.weights;
    let mut d2 = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { 0.0 } else { 0.5 * (w[(i, j)] + w[(j, i)]) };
            d2[(i, j)] = d * d;
        }
    }
    // B = -½ J D² J with J = I - 11ᵀ/n
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let eig = sym_eig(&b, 1e-9 * (1.0 + b.max_abs()))?;
    let scales: Vec<f64> = eig.values.iter().take(2).map(|&l| l.max(0.0).sqrt()).collect();
    Ok(graph
        .keys
        .iter()
        .enumerate()
        .map(|(i, &key)| MdsPoint {
            key,
            x: eig.vectors[(i, 0)] * scales[0],
            y: if n > 1 { eig.vectors[(i, 1)] * scales.get(1).copied().unwrap_or(0.0) } else { 0.0 },
        })
        .collect())
}
