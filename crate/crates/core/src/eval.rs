//! Accuracy breakdowns, train/test feature discrepancy and correlation reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DomainClassKey, Sample};
use crate::error::{ensure, Result};
use crate::model::ModelParams;
use crate::numerics::{euclidean, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotThresholds {
    /// Pairs with more training samples than this are many-shot.
    pub many_min: usize,
    /// Pairs with fewer training samples than this (but at least one) are few-shot.
    pub few_max: usize,
}

impl Default for ShotThresholds {
    fn default() -> Self {
        ShotThresholds { many_min: 100, few_max: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotRegion {
    Many,
    Medium,
    Few,
    Zero,
}

impl ShotRegion {
    pub const ALL: [ShotRegion; 4] = [ShotRegion::Many, ShotRegion::Medium, ShotRegion::Few, ShotRegion::Zero];

    pub fn of(count: usize, t: ShotThresholds) -> Self {
        if count == 0 {
            ShotRegion::Zero
        } else if count < t.few_max {
            ShotRegion::Few
        } else if count <= t.many_min {
            ShotRegion::Medium
        } else {
            ShotRegion::Many
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShotRegion::Many => "many",
            ShotRegion::Medium => "medium",
            ShotRegion::Few => "few",
            ShotRegion::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub key: DomainClassKey,
    pub train_count: usize,
    pub region: ShotRegion,
    pub correct: usize,
    pub total: usize,
    /// Percent; `None` when the pair has no evaluation samples.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Percent, mean over the domain's pairs.
    pub per_domain: Vec<f64>,
    pub average: f64,
    /// Lowest per-domain accuracy.
    pub worst: f64,
    /// Mean pair accuracy per shot region; `None` when the region is empty.
    pub shots: BTreeMap<ShotRegion, Option<f64>>,
    /// Number of pairs per shot region.
    pub region_sizes: BTreeMap<ShotRegion, usize>,
    /// Lowest pair accuracy (diagnostic).
    pub worst_pair: Option<f64>,
    pub pairs: Vec<PairAccuracy>,
}

impl AccuracyReport {
    /// Writes `domain,class,accuracy,shot_region`.
    pub fn write_pair_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["domain", "class", "accuracy", "shot_region"])?;
        for p in &self.pairs {
            let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
            wtr.write_record([p.key.domain.to_string(), p.key.class.to_string(), acc, p.region.name().to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn inputs(samples: &[Sample]) -> Result<Mat> {
    ensure!(!samples.is_empty(), "no samples");
    let dim = samples[0].x.len();
    let data = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Mat::from_vec(samples.len(), dim, data)
}

pub fn predict(p: &ModelParams, samples: &[Sample]) -> Result<Vec<usize>> {
    let logits = p.forward_batch(&inputs(samples)?)?.logits;
    Ok((0..logits.rows).map(|i| argmax(logits.row(i))).collect())
}

/// Breakdown from precomputed predictions; `counts` are training counts.
pub fn report_from_predictions(
    predictions: &[usize],
    samples: &[Sample],
    num_domains: usize,
    num_classes: usize,
    counts: &BTreeMap<DomainClassKey, usize>,
    thresholds: ShotThresholds,
) -> Result<AccuracyReport> {
    ensure!(predictions.len() == samples.len(), "prediction count does not match samples");
    ensure!(!samples.is_empty(), "evaluation set is empty");
    let mut tally: BTreeMap<DomainClassKey, (usize, usize)> = BTreeMap::new();
    for (pred, s) in predictions.iter().zip(samples) {
        ensure!(
            s.key.domain < num_domains && s.key.class < num_classes,
            "sample pair {} outside the {num_domains}x{num_classes} grid",
            s.key
        );
        let e = tally.entry(s.key).or_default();
        e.0 += usize::from(*pred == s.key.class);
        e.1 += 1;
    }
    let mut pairs = Vec::with_capacity(num_domains * num_classes);
    for d in 0..num_domains {
        for c in 0..num_classes {
            let key = DomainClassKey::new(d, c);
            let (correct, total) = tally.get(&key).copied().unwrap_or((0, 0));
            let train_count = counts.get(&key).copied().unwrap_or(0);
            pairs.push(PairAccuracy {
                key,
                train_count,
                region: ShotRegion::of(train_count, thresholds),
                correct,
                total,
                accuracy: (total > 0).then(|| 100.0 * correct as f64 / total as f64),
            });
        }
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let per_domain: Vec<f64> = (0..num_domains)
        .filter_map(|d| mean(pairs.iter().filter(|p| p.key.domain == d).filter_map(|p| p.accuracy).collect()))
        .collect();
    let average = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    let worst = per_domain.iter().copied().fold(f64::INFINITY, f64::min);
    let mut shots = BTreeMap::new();
    let mut region_sizes = BTreeMap::new();
    for r in ShotRegion::ALL {
        shots.insert(r, mean(pairs.iter().filter(|p| p.region == r).filter_map(|p| p.accuracy).collect()));
        region_sizes.insert(r, pairs.iter().filter(|p| p.region == r).count());
    }
    let worst_pair = pairs.iter().filter_map(|p| p.accuracy).reduce(f64::min);
    Ok(AccuracyReport { per_domain, average, worst, shots, region_sizes, worst_pair, pairs })
}

/// Test-set breakdown with argmax predictions.
pub fn accuracy_report(p: &ModelParams, ds: &Dataset, thresholds: ShotThresholds) -> Result<AccuracyReport> {
    evaluate_split(p, ds, &ds.test, thresholds)
}

pub fn evaluate_split(p: &ModelParams, ds: &Dataset, samples: &[Sample], thresholds: ShotThresholds) -> Result<AccuracyReport> {
    let preds = predict(p, samples)?;
    report_from_predictions(&preds, samples, ds.num_domains, ds.num_classes, &ds.counts, thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiscrepancy {
    pub key: DomainClassKey,
    pub train_count: usize,
    /// Distance between this pair's train and test feature means.
    pub within_dist: Option<f64>,
    /// Smallest distance from this pair's test mean to a same-class train mean in another domain.
    pub best_cross_dist: Option<f64>,
    /// Domain attaining `best_cross_dist`.
    pub best_cross_domain: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub pairs: Vec<PairDiscrepancy>,
    /// Pearson correlation of `log(N_cross / N_own)` against `log(within / cross)`
    /// over pairs having both distances.
    pub ratio_correlation: f64,
    pub ratio_points: usize,
    pub degenerate: bool,
}

fn group_means(features: &Mat, samples: &[Sample]) -> BTreeMap<DomainClassKey, Vec<f64>> {
    let mut sums: BTreeMap<DomainClassKey, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let e = sums.entry(s.key).or_insert_with(|| (vec![0.0; features.cols], 0));
        crate::numerics::axpy(&mut e.0, 1.0, features.row(i));
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (mut v, n))| {
            v.iter_mut().for_each(|x| *x /= n as f64);
            (k, v)
        })
        .collect()
}

pub fn feature_discrepancy(p: &ModelParams, ds: &Dataset) -> Result<DiscrepancyReport> {
    ensure!(!ds.test.is_empty(), "test set is empty");
    let train_mu = if ds.train.is_empty() {
        BTreeMap::new()
    } else {
        group_means(&p.encode(&inputs(&ds.train)?)?, &ds.train)
    };
    let test_mu = group_means(&p.encode(&inputs(&ds.test)?)?, &ds.test);
    discrepancy_from_means(&train_mu, &test_mu, &ds.counts)
}

pub fn discrepancy_from_means(
    train_mu: &BTreeMap<DomainClassKey, Vec<f64>>,
    test_mu: &BTreeMap<DomainClassKey, Vec<f64>>,
    counts: &BTreeMap<DomainClassKey, usize>,
) -> Result<DiscrepancyReport> {
    let mut pairs = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (key, mu_test) in test_mu {
        let within_dist = train_mu.get(key).map(|m| euclidean(m, mu_test));
        let best = train_mu
            .iter()
            .filter(|(k, _)| k.class == key.class && k.domain != key.domain)
            .map(|(k, m)| (k.domain, euclidean(m, mu_test)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let train_count = counts.get(key).copied().unwrap_or(0);
        if let (Some(w), Some((d, x))) = (within_dist, best) {
            let other = counts.get(&DomainClassKey::new(d, key.class)).copied().unwrap_or(0);
            if w > 0.0 && x > 0.0 && train_count > 0 && other > 0 {
                xs.push((other as f64 / train_count as f64).ln());
                ys.push((w / x).ln());
            }
        }
        pairs.push(PairDiscrepancy {
            key: *key,
            train_count,
            within_dist,
            best_cross_dist: best.map(|b| b.1),
            best_cross_domain: best.map(|b| b.0),
        });
    }
    let (ratio_correlation, degenerate) = match pearson(&xs, &ys) {
        Some(r) => (r, false),
        None => (0.0, true),
    };
    Ok(DiscrepancyReport { pairs, ratio_correlation, ratio_points: xs.len(), degenerate })
}

/// Pearson correlation; `None` when either side has zero variance or fewer than 2 points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    /// Set when a side has zero variance; both correlations are then reported as 0.
    pub degenerate: bool,
}

/// Correlation of the separation score `(β+γ)−α` with accuracy.
pub fn stats_accuracy_correlation(scores: &[f64], accuracies: &[f64]) -> Result<CorrelationReport> {
    ensure!(scores.len() == accuracies.len(), "scores and accuracies differ in length");
    ensure!(scores.len() >= 3, "correlation needs at least 3 records, got {}", scores.len());
    let p = pearson(scores, accuracies);
    let s = spearman(scores, accuracies);
    Ok(CorrelationReport {
        n: scores.len(),
        pearson: p.unwrap_or(0.0),
        spearman: s.unwrap_or(0.0),
        degenerate: p.is_none() || s.is_none(),
    })
}
