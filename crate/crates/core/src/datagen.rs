//! Synthetic multi-domain long-tailed datasets.
//!
//! Class prototypes sit on a circle in the first two input coordinates; each
//! domain rotates and translates the prototypes, and samples are prototype
//! plus isotropic Gaussian noise. Per-domain label profiles control how many
//! training samples each domain-class pair receives, while validation and
//! test splits stay balanced over every pair.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Rng;

/// A domain-class pair `(d, c)`; serialized as `[d, c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct DomainClassKey {
    pub domain: usize,
    pub class: usize,
}

impl DomainClassKey {
    pub fn new(domain: usize, class: usize) -> Self {
        DomainClassKey { domain, class }
    }
}

impl From<(usize, usize)> for DomainClassKey {
    fn from((domain, class): (usize, usize)) -> Self {
        DomainClassKey { domain, class }
    }
}

impl From<DomainClassKey> for (usize, usize) {
    fn from(k: DomainClassKey) -> Self {
        (k.domain, k.class)
    }
}

impl fmt::Display for DomainClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.domain, self.class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub key: DomainClassKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Uniform,
    ForwardLt,
    BackwardLt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProfile {
    pub kind: ProfileKind,
    pub max_count: usize,
    #[serde(default = "one")]
    pub imbalance_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl LabelProfile {
    pub fn uniform(max_count: usize) -> Self {
        LabelProfile { kind: ProfileKind::Uniform, max_count, imbalance_ratio: 1.0 }
    }

    pub fn forward(max_count: usize, ratio: f64) -> Self {
        LabelProfile { kind: ProfileKind::ForwardLt, max_count, imbalance_ratio: ratio }
    }

    pub fn backward(max_count: usize, ratio: f64) -> Self {
        LabelProfile { kind: ProfileKind::BackwardLt, max_count, imbalance_ratio: ratio }
    }
}

/// Rigid transform a domain applies to the class prototypes: rotation (radians)
/// in the plane of the first two coordinates, then translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation: f64,
    pub translation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub profiles: Vec<LabelProfile>,
    pub domain_shift: Vec<DomainShift>,
    pub class_separation: f64,
    pub noise_std: f64,
    /// Pairs forced to have no training samples.
    #[serde(default)]
    pub zero_pairs: BTreeSet<DomainClassKey>,
    pub test_per_pair: usize,
    pub val_per_pair: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Two domains, ten classes, 16 input dimensions, with the given
    /// per-domain profiles. Class structure lives in the first two
    /// coordinates; domain 1 is rotated by a quarter class step there and
    /// offset along the third coordinate, so domains are separable.
    pub fn two_domain(profile0: LabelProfile, profile1: LabelProfile, seed: u64) -> Self {
        let input_dim = 16;
        let mut t1 = vec![0.0; input_dim];
        t1[2] = 6.0;
        DatasetSpec {
            num_domains: 2,
            num_classes: 10,
            input_dim,
            profiles: vec![profile0, profile1],
            domain_shift: vec![
                DomainShift { rotation: 0.0, translation: vec![0.0; input_dim] },
                DomainShift { rotation: PI / 20.0, translation: t1 },
            ],
            class_separation: 4.0,
            noise_std: 0.7,
            zero_pairs: BTreeSet::new(),
            test_per_pair: 200,
            val_per_pair: 50,
            seed,
        }
    }

    /// Forward-LT in domain 0 against Backward-LT in domain 1 (ratio 100,
    /// 800 down to 8 samples per pair).
    pub fn divergent(seed: u64) -> Self {
        Self::two_domain(LabelProfile::forward(800, 100.0), LabelProfile::backward(800, 100.0), seed)
    }

    /// Both domains balanced.
    pub fn balanced(seed: u64) -> Self {
        Self::two_domain(LabelProfile::uniform(1000), LabelProfile::uniform(1000), seed)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_domains >= 1, "num_domains must be positive");
        ensure!(self.num_classes >= 2, "num_classes must be at least 2, got {}", self.num_classes);
        ensure!(self.input_dim >= 2, "input_dim must be at least 2, got {}", self.input_dim);
        ensure!(
            self.profiles.len() == self.num_domains,
            "profiles has {} entries but num_domains is {}",
            self.profiles.len(),
            self.num_domains
        );
        ensure!(
            self.domain_shift.len() == self.num_domains,
            "domain_shift has {} entries but num_domains is {}",
            self.domain_shift.len(),
            self.num_domains
        );
        for (d, shift) in self.domain_shift.iter().enumerate() {
            ensure!(
                shift.translation.len() == self.input_dim,
                "domain_shift[{d}].translation has length {} but input_dim is {}",
                shift.translation.len(),
                self.input_dim
            );
            ensure!(
                shift.rotation.is_finite() && shift.translation.iter().all(|t| t.is_finite()),
                "domain_shift[{d}] has non-finite values"
            );
        }
        ensure!(
            self.class_separation > 0.0 && self.class_separation.is_finite(),
            "class_separation must be positive"
        );
        ensure!(self.noise_std > 0.0 && self.noise_std.is_finite(), "noise_std must be positive");
        ensure!(self.test_per_pair >= 1, "test_per_pair must be positive");
        ensure!(self.val_per_pair >= 1, "val_per_pair must be positive");
        for k in &self.zero_pairs {
            ensure!(
                k.domain < self.num_domains && k.class < self.num_classes,
                "zero pair {k} out of range"
            );
        }
        for p in &self.profiles {
            profile_counts(p, self.num_classes)?;
        }
        Ok(())
    }
}

/// Per-class training counts for one domain.
///
/// Forward-LT decays geometrically from `max_count` at class 0 to
/// `max_count / ratio` at the last class; Backward-LT is its reversal.
pub fn profile_counts(profile: &LabelProfile, num_classes: usize) -> Result<Vec<usize>> {
    ensure!(num_classes >= 2, "num_classes must be at least 2, got {num_classes}");
    ensure!(profile.max_count >= 1, "max_count must be positive");
    let r = profile.imbalance_ratio;
    if profile.kind != ProfileKind::Uniform {
        ensure!(r.is_finite() && r >= 1.0, "imbalance_ratio must be >= 1, got {r}");
    }
    let forward = || -> Vec<usize> {
        (0..num_classes)
            .map(|c| {
                let exponent = -(c as f64) / (num_classes - 1) as f64;
                (profile.max_count as f64 * r.powf(exponent)).round() as usize
            })
            .collect()
    };
    Ok(match profile.kind {
        ProfileKind::Uniform => vec![profile.max_count; num_classes],
        ProfileKind::ForwardLt => forward(),
        ProfileKind::BackwardLt => {
            let mut v = forward();
            v.reverse();
            v
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Training count for every pair in `D × C`, zeros included.
    pub counts: BTreeMap<DomainClassKey, usize>,
}

impl Dataset {
    pub fn all_keys(&self) -> impl Iterator<Item = DomainClassKey> + '_ {
        (0..self.num_domains)
            .flat_map(move |d| (0..self.num_classes).map(move |c| DomainClassKey::new(d, c)))
    }

    pub fn count(&self, key: DomainClassKey) -> usize {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    /// Indices of the training samples, grouped per domain.
    pub fn train_indices_by_domain(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_domains];
        for (i, s) in self.train.iter().enumerate() {
            out[s.key.domain].push(i);
        }
        out
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes `split,domain,class,x0,…` rows, train then val then test.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["split".to_string(), "domain".to_string(), "class".to_string()];
        header.extend((0..self.input_dim).map(|i| format!("x{i}")));
        wtr.write_record(&header)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in self.split(split) {
                let mut rec = Vec::with_capacity(3 + s.x.len());
                rec.push(split.to_string());
                rec.push(s.key.domain.to_string());
                rec.push(s.key.class.to_string());
                rec.extend(s.x.iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the CSV layout written by [`Dataset::write_csv`]. Domain and class
    /// counts are inferred from the largest ids present in any split.
    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        ensure!(
            headers.len() >= 5
                && &headers[0] == "split"
                && &headers[1] == "domain"
                && &headers[2] == "class",
            "dataset header must start with split,domain,class and have at least two features"
        );
        let input_dim = headers.len() - 3;
        for (i, h) in headers.iter().skip(3).enumerate() {
            ensure!(h == format!("x{i}"), "unexpected feature column '{h}'");
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let (mut max_d, mut max_c) = (0usize, 0usize);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_usize = |i: usize| -> Result<usize> {
                rec[i].parse().map_err(|_| {
                    Error::validation(format!("row {}: bad integer '{}'", line + 2, &rec[i]))
                })
            };
            let split: Split = rec[0].parse()?;
            let key = DomainClassKey::new(parse_usize(1)?, parse_usize(2)?);
            let x = (3..rec.len())
                .map(|i| {
                    rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        Error::validation(format!("row {}: bad value '{}'", line + 2, &rec[i]))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            max_d = max_d.max(key.domain);
            max_c = max_c.max(key.class);
            let sample = Sample { x, key };
            match split {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
                Split::Test => test.push(sample),
            }
        }
        ensure!(!train.is_empty() || !test.is_empty(), "dataset file has no rows");
        let (num_domains, num_classes) = (max_d + 1, max_c + 1);
        let counts = count_pairs(&train, num_domains, num_classes);
        Ok(Dataset { num_domains, num_classes, input_dim, train, val, test, counts })
    }
}

fn count_pairs(
    train: &[Sample],
    num_domains: usize,
    num_classes: usize,
) -> BTreeMap<DomainClassKey, usize> {
    let mut counts: BTreeMap<DomainClassKey, usize> = (0..num_domains)
        .flat_map(|d| (0..num_classes).map(move |c| (DomainClassKey::new(d, c), 0)))
        .collect();
    for s in train {
        *counts.entry(s.key).or_insert(0) += 1;
    }
    counts
}

/// Prototype of class `c` in domain `d`.
fn prototype(spec: &DatasetSpec, d: usize, c: usize) -> Vec<f64> {
    let angle = 2.0 * PI * c as f64 / spec.num_classes as f64;
    let (px, py) = (spec.class_separation * angle.cos(), spec.class_separation * angle.sin());
    let shift = &spec.domain_shift[d];
    let (s, co) = shift.rotation.sin_cos();
    let mut p = vec![0.0; spec.input_dim];
    p[0] = co * px - s * py;
    p[1] = s * px + co * py;
    for (pi, t) in p.iter_mut().zip(&shift.translation) {
        *pi += t;
    }
    p
}

/// Draws a dataset. A pure function of `spec`, seed included.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let train_counts: Vec<Vec<usize>> = spec
        .profiles
        .iter()
        .map(|p| profile_counts(p, spec.num_classes))
        .collect::<Result<_>>()?;

    let mut draw = |split_size: &dyn Fn(usize, usize) -> usize| -> Vec<Sample> {
        let mut out = Vec::new();
        for d in 0..spec.num_domains {
            for c in 0..spec.num_classes {
                let proto = prototype(spec, d, c);
                for _ in 0..split_size(d, c) {
                    let x = proto.iter().map(|p| p + spec.noise_std * rng.next_gaussian()).collect();
                    out.push(Sample { x, key: DomainClassKey::new(d, c) });
                }
            }
        }
        out
    };

    let train = draw(&|d, c| {
        if spec.zero_pairs.contains(&DomainClassKey::new(d, c)) {
            0
        } else {
            train_counts[d][c]
        }
    });
    let val = draw(&|_, _| spec.val_per_pair);
    let test = draw(&|_, _| spec.test_per_pair);
    let counts = count_pairs(&train, spec.num_domains, spec.num_classes);
    Ok(Dataset {
        num_domains: spec.num_domains,
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        train,
        val,
        test,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDivergence {
    /// `KL(p_d(y) ‖ Uniform)` per domain.
    pub to_uniform: Vec<f64>,
    /// `pairwise[d][d'] = KL(p_d ‖ p_d')`; zero on the diagonal.
    pub pairwise: Vec<Vec<f64>>,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0)
}

/// Divergence of the empirical training label distributions, add-one smoothed.
pub fn label_divergence(ds: &Dataset) -> Result<LabelDivergence> {
    let c = ds.num_classes;
    let dists: Vec<Vec<f64>> = (0..ds.num_domains)
        .map(|d| {
            let counts: Vec<usize> = (0..c).map(|k| ds.count(DomainClassKey::new(d, k))).collect();
            let total: usize = counts.iter().sum();
            ensure!(total > 0, "domain {d} has no training samples");
            let denom = (total + c) as f64;
            Ok(counts.iter().map(|&n| (n + 1) as f64 / denom).collect())
        })
        .collect::<Result<_>>()?;
    let uniform = vec![1.0 / c as f64; c];
    let to_uniform = dists.iter().map(|p| kl(p, &uniform)).collect();
    let pairwise = dists
        .iter()
        .map(|p| dists.iter().map(|q| kl(p, q)).collect())
        .collect();
    Ok(LabelDivergence { to_uniform, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        let mut spec = DatasetSpec::divergent(3);
        spec.profiles = vec![LabelProfile::forward(60, 10.0), LabelProfile::backward(60, 10.0)];
        spec.test_per_pair = 7;
        spec.val_per_pair = 3;
        spec
    }

    #[test]
    fn uniform_profile() {
        let v = profile_counts(&LabelProfile::uniform(1000), 10).unwrap();
        assert_eq!(v, vec![1000; 10]);
    }

    #[test]
    fn forward_profile_matches_geometric_law() {
        let v = profile_counts(&LabelProfile::forward(1000, 100.0), 10).unwrap();
        // 1000 · 100^(-c/9), rounded
        let expect = [1000, 599, 359, 215, 129, 77, 46, 28, 17, 10];
        assert_eq!(v, expect);
    }

    #[test]
    fn backward_profile_is_reversed_forward() {
        let mut f = profile_counts(&LabelProfile::forward(500, 20.0), 7).unwrap();
        let b = profile_counts(&LabelProfile::backward(500, 20.0), 7).unwrap();
        f.reverse();
        assert_eq!(f, b);
    }

    #[test]
    fn ratio_below_one_rejected() {
        let err = profile_counts(&LabelProfile::forward(100, 0.5), 5).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_pairs_only_remove_training_data() {
        let mut spec = small_spec();
        spec.zero_pairs.insert(DomainClassKey::new(0, 3));
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.count(DomainClassKey::new(0, 3)), 0);
        let in_test = ds.test.iter().filter(|s| s.key == DomainClassKey::new(0, 3)).count();
        assert_eq!(in_test, spec.test_per_pair);
    }

    #[test]
    fn splits_balanced_and_counts_consistent() {
        let ds = generate(&small_spec()).unwrap();
        for (split, per) in [(&ds.test, 7usize), (&ds.val, 3)] {
            let mut m: BTreeMap<DomainClassKey, usize> = BTreeMap::new();
            for s in split.iter() {
                *m.entry(s.key).or_default() += 1;
            }
            assert_eq!(m.len(), 20);
            assert!(m.values().all(|&n| n == per));
        }
        assert_eq!(ds.counts.values().sum::<usize>(), ds.train.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn input_dim_below_two_rejected() {
        let mut spec = small_spec();
        spec.input_dim = 1;
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn domain_means_agree_without_shift() {
        let mut spec = DatasetSpec::balanced(11);
        for s in &mut spec.domain_shift {
            s.rotation = 0.0;
            s.translation.iter_mut().for_each(|t| *t = 0.0);
        }
        let n = 1000usize;
        let ds = generate(&spec).unwrap();
        let mean = |d: usize, c: usize| -> Vec<f64> {
            let xs: Vec<&Sample> =
                ds.train.iter().filter(|s| s.key == DomainClassKey::new(d, c)).collect();
            assert_eq!(xs.len(), n);
            (0..spec.input_dim)
                .map(|j| xs.iter().map(|s| s.x[j]).sum::<f64>() / n as f64)
                .collect()
        };
        // difference of two independent means has std σ·√(2/N) per coordinate
        let bound = 3.0 * spec.noise_std * (2.0 / n as f64).sqrt();
        for c in 0..spec.num_classes {
            let (m0, m1) = (mean(0, c), mean(1, c));
            for j in 0..spec.input_dim {
                assert!((m0[j] - m1[j]).abs() <= bound, "class {c} coord {j}");
            }
        }
    }

    #[test]
    fn divergence_of_identical_balanced_domains_is_zero() {
        let ds = generate(&DatasetSpec::balanced(1)).unwrap();
        let div = label_divergence(&ds).unwrap();
        assert!(div.to_uniform.iter().all(|&v| v.abs() < 1e-12));
        assert!(div.pairwise.iter().flatten().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn divergent_profiles_diverge_more_than_imbalance() {
        let ds = generate(&DatasetSpec::divergent(1)).unwrap();
        let div = label_divergence(&ds).unwrap();
        // direct computation from the counts
        let p = |d: usize| -> Vec<f64> {
            let counts: Vec<f64> =
                (0..10).map(|c| ds.count(DomainClassKey::new(d, c)) as f64 + 1.0).collect();
            let t: f64 = counts.iter().sum();
            counts.iter().map(|n| n / t).collect()
        };
        let (p0, p1) = (p(0), p(1));
        let direct: f64 = p0.iter().zip(&p1).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((div.pairwise[0][1] - direct).abs() < 1e-12);
        assert!(div.pairwise[0][1] > div.to_uniform[0]);
        assert!(div.pairwise[1][0] > div.to_uniform[1]);
    }

    #[test]
    fn single_class_domain_against_uniform() {
        let mut spec = DatasetSpec::balanced(2);
        spec.zero_pairs = (1..10).map(|c| DomainClassKey::new(0, c)).collect();
        let ds = generate(&spec).unwrap();
        let div = label_divergence(&ds).unwrap();
        // smoothed: p = (1001, 1, …, 1)/1010, closed form
        let big: f64 = 1001.0 / 1010.0;
        let small: f64 = 1.0 / 1010.0;
        let closed = big * (big * 10.0).ln() + 9.0 * small * (small * 10.0).ln();
        assert!((div.to_uniform[0] - closed).abs() < 1e-12);
        assert!(div.to_uniform[0] < 10f64.ln());
        assert!(div.to_uniform[0] > 10f64.ln() - 0.1);
    }

    #[test]
    fn empty_domain_rejected() {
        let mut spec = DatasetSpec::balanced(2);
        spec.zero_pairs = (0..10).map(|c| DomainClassKey::new(1, c)).collect();
        let ds = generate(&spec).unwrap();
        assert!(matches!(label_divergence(&ds), Err(Error::Validation(_))));
    }

    #[test]
    fn spec_json_missing_field_names_it() {
        let mut v = serde_json::to_value(small_spec()).unwrap();
        v.as_object_mut().unwrap().remove("noise_std");
        let err = serde_json::from_value::<DatasetSpec>(v).unwrap_err();
        assert!(err.to_string().contains("noise_std"));
    }
}
