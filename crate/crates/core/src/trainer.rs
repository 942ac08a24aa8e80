//! Training loop with epoch-boundary momentum statistics, classifier
//! retraining on frozen features, and a small hyperparameter sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DomainClassKey, Sample};
use crate::error::{ensure, Error, Result};
use crate::eval::{accuracy_report, evaluate_split, inputs, ShotThresholds};
use crate::losses::{ce_loss, sample_loss, verify_bound, LossVariant, Scaling};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::{axpy, Mat, Rng, DEFAULT_EPS_REL};
use crate::optim::{Optimizer, OptimizerKind};
use crate::stats::{
    build_graph, compute_stats, group, momentum_update, transfer_stats, within_spread, Centroids, StatsStore, TransferStats,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_per_domain: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub variant: LossVariant,
    /// Weight of the alignment loss; 0 trains with cross-entropy only.
    pub omega: f64,
    pub nu: f64,
    /// Momentum for the per-pair statistics merge.
    pub alpha_m: f64,
    pub eps_rel: f64,
    pub hidden: Vec<usize>,
    pub repr: usize,
    pub decouple: bool,
    pub decouple_steps: usize,
    /// Steps between log records.
    pub eval_every: usize,
    /// Steps between statistics refreshes; defaults to one epoch.
    pub stats_interval: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_per_domain: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            variant: LossVariant::CalibratedBoda,
            omega: 0.1,
            nu: 1.0,
            alpha_m: 0.9,
            eps_rel: DEFAULT_EPS_REL,
            hidden: vec![64, 64],
            repr: 16,
            decouple: false,
            decouple_steps: 1000,
            eval_every: 250,
            stats_interval: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Cross-entropy only.
    pub fn erm(seed: u64) -> Self {
        TrainConfig { omega: 0.0, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps > 0, "steps must be positive");
        ensure!(self.batch_per_domain > 0, "batch_per_domain must be positive");
        ensure!(self.lr.is_finite() && self.lr > 0.0, "lr must be positive");
        ensure!(self.omega.is_finite() && self.omega >= 0.0, "omega must be >= 0");
        ensure!(self.nu.is_finite() && self.nu >= 0.0, "nu must be >= 0");
        ensure!((0.0..=1.0).contains(&self.alpha_m), "alpha_m must lie in [0, 1]");
        ensure!(self.eps_rel.is_finite() && self.eps_rel >= 0.0, "eps_rel must be >= 0");
        ensure!(self.repr > 0, "repr must be positive");
        ensure!(self.hidden.iter().all(|&h| h > 0), "hidden sizes must be positive");
        ensure!(self.eval_every > 0, "eval_every must be positive");
        ensure!(self.stats_interval != Some(0), "stats_interval must be positive");
        Ok(())
    }

    pub fn dims(&self, ds: &Dataset) -> ModelDims {
        ModelDims::new(ds.input_dim, self.hidden.clone(), self.repr, ds.num_classes)
    }

    fn scaling(&self) -> Scaling {
        self.variant.scaling(self.nu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1 for joint training, 2 for classifier retraining.
    pub stage: u8,
    pub step: usize,
    /// Losses averaged over the steps since the previous record.
    pub ce: f64,
    pub boda: f64,
    pub joint: f64,
    pub val_acc: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub bound_gap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Joint loss at every optimizer step of stage 1.
    #[serde(skip)]
    pub trace: Vec<f64>,
    pub stats_refreshes: usize,
    pub skipped_samples: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["stage", "step", "ce", "boda", "joint", "val_acc", "alpha", "beta", "gamma", "bound_gap"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            wtr.write_record([
                r.stage.to_string(),
                r.step.to_string(),
                r.ce.to_string(),
                r.boda.to_string(),
                r.joint.to_string(),
                r.val_acc.to_string(),
                opt(r.alpha),
                opt(r.beta),
                opt(r.gamma),
                opt(r.bound_gap),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Representations of `samples` and their pair keys.
pub fn features(p: &ModelParams, samples: &[Sample]) -> Result<(Vec<Vec<f64>>, Vec<DomainClassKey>)> {
    let z = p.encode(&inputs(samples)?)?;
    let rows = (0..z.rows).map(|i| z.row(i).to_vec()).collect();
    Ok((rows, samples.iter().map(|s| s.key).collect()))
}

fn fresh_stats(p: &ModelParams, samples: &[Sample]) -> Result<StatsStore> {
    let (z, keys) = features(p, samples)?;
    compute_stats(&group(&keys, &z))
}

/// `(α, β, γ)` (with calibration at `nu`) of a model's features on `samples`.
pub fn model_transfer_stats(p: &ModelParams, samples: &[Sample], cfg: &TrainConfig) -> Result<TransferStats> {
    let (z, keys) = features(p, samples)?;
    stats_of(&z, &keys, cfg)
}

/// Same as [`model_transfer_stats`] after dividing the features by their
/// within-pair spread, so that rescaling the representation (and inversely
/// the classifier) leaves the result unchanged.
pub fn normalized_transfer_stats(p: &ModelParams, samples: &[Sample], cfg: &TrainConfig) -> Result<TransferStats> {
    let (mut z, keys) = features(p, samples)?;
    let spread = {
        let groups = group(&keys, &z);
        within_spread(&groups, &compute_stats(&groups)?)?
    };
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::numerical(format!("degenerate feature spread {spread}")));
    }
    z.iter_mut().flatten().for_each(|v| *v /= spread);
    stats_of(&z, &keys, cfg)
}

fn stats_of(z: &[Vec<f64>], keys: &[DomainClassKey], cfg: &TrainConfig) -> Result<TransferStats> {
    let groups = group(keys, z);
    let store = compute_stats(&groups)?;
    let graph = build_graph(&store, &groups, cfg.variant.metric(cfg.eps_rel))?;
    transfer_stats(&graph, Some(cfg.nu), &store.counts())
}

fn diagnostics(p: &ModelParams, ds: &Dataset, cfg: &TrainConfig) -> Result<(Option<TransferStats>, Option<f64>)> {
    let (z, keys) = features(p, &ds.train)?;
    let groups = group(&keys, &z);
    let store = compute_stats(&groups)?;
    if store.domains().len() < 2 || store.classes().len() < 2 {
        return Ok((None, None));
    }
    let calibrated = matches!(cfg.variant, LossVariant::CalibratedBoda | LossVariant::BodaM);
    let report = verify_bound(&z, &keys, &store, cfg.variant.metric(cfg.eps_rel), cfg.nu, calibrated)?;
    Ok((Some(report.stats), Some(report.gap)))
}

struct Window {
    ce: f64,
    boda: f64,
    joint: f64,
    n: usize,
}

impl Window {
    fn new() -> Self {
        Window { ce: 0.0, boda: 0.0, joint: 0.0, n: 0 }
    }

    fn push(&mut self, ce: f64, boda: f64, joint: f64) {
        self.ce += ce;
        self.boda += boda;
        self.joint += joint;
        self.n += 1;
    }

    fn take(&mut self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let out = (self.ce / n, self.boda / n, self.joint / n);
        *self = Window::new();
        out
    }
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("{what} became non-finite at step {step}")))
    }
}

/// Joint training of encoder and classifier.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    ensure!(!ds.train.is_empty(), "training set is empty");
    let align = cfg.omega > 0.0;
    let by_domain: Vec<Vec<usize>> = ds.train_indices_by_domain().into_iter().filter(|v| !v.is_empty()).collect();
    if align {
        ensure!(by_domain.len() >= 2, "alignment needs training data in at least 2 domains");
        let classes: std::collections::BTreeSet<usize> = ds.train.iter().map(|s| s.key.class).collect();
        ensure!(classes.len() >= 2, "alignment needs training data in at least 2 classes");
    }

    let mut params = ModelParams::init(&cfg.dims(ds), cfg.seed)?;
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let total_batch = cfg.batch_per_domain * by_domain.len();
    let interval = cfg.stats_interval.unwrap_or_else(|| ds.train.len().div_ceil(total_batch));
    let metric = cfg.variant.metric(cfg.eps_rel);

    let mut store = if align { Some(fresh_stats(&params, &ds.train)?) } else { None };
    let mut centroids = match &store {
        Some(s) => Some(Centroids::new(s, metric)?),
        None => None,
    };
    let mut log = TrainLog::default();
    let mut window = Window::new();
    let mut x = Mat::zeros(total_batch, ds.input_dim);
    let mut keys = vec![DomainClassKey::new(0, 0); total_batch];

    for step in 0..cfg.steps {
        let epoch = step / interval;
        if align && step > 0 && step % interval == 0 {
            let cur = fresh_stats(&params, &ds.train)?;
            let merged = momentum_update(store.as_ref().expect("stats initialised"), &cur, cfg.alpha_m)?;
            centroids = Some(Centroids::new(&merged, metric)?);
            store = Some(merged);
            log.stats_refreshes += 1;
        }
        if let Some(s) = &store {
            // statistics come from parameters before this epoch's first step
            if s.version > epoch {
                return Err(Error::numerical(format!(
                    "statistics version {} is ahead of epoch {epoch}",
                    s.version
                )));
            }
        }

        let mut row = 0;
        for idx in &by_domain {
            for _ in 0..cfg.batch_per_domain {
                let s = &ds.train[idx[rng.below(idx.len())]];
                x.row_mut(row).copy_from_slice(&s.x);
                keys[row] = s.key;
                row += 1;
            }
        }

        let fwd = params.forward_batch(&x)?;
        let n = total_batch as f64;
        let mut grad_logits = Mat::zeros(total_batch, ds.num_classes);
        let mut ce = 0.0;
        for (i, k) in keys.iter().enumerate() {
            let (l, g) = ce_loss(fwd.logits.row(i), k.class)?;
            ce += l;
            axpy(grad_logits.row_mut(i), 1.0 / n, &g);
        }
        ce /= n;

        let mut grad_z = Mat::zeros(total_batch, cfg.repr);
        let mut boda = 0.0;
        if let Some(c) = &centroids {
            let mut terms = Vec::with_capacity(total_batch);
            for (i, k) in keys.iter().enumerate() {
                match sample_loss(fwd.z().row(i), *k, c, cfg.scaling())? {
                    Some(s) => terms.push((i, s)),
                    None => log.skipped_samples += 1,
                }
            }
            if !terms.is_empty() {
                let w = cfg.omega / terms.len() as f64;
                for (i, s) in &terms {
                    boda += s.loss;
                    axpy(grad_z.row_mut(*i), w, &s.grad);
                }
                boda /= terms.len() as f64;
            }
        }
        let joint = crate::losses::joint_loss(ce, boda, cfg.omega);
        check_finite(joint, "joint loss", step)?;
        log.trace.push(joint);
        window.push(ce, boda, joint);

        let grads = params.backward(&fwd, &grad_z, &grad_logits)?;
        opt.step(params.tensors_mut(), grads.tensors());
        params.step = step + 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let (ce, boda, joint) = window.take();
            let val_acc = evaluate_split(&params, ds, val_or_test(ds), ShotThresholds::default())?.average;
            let (ts, gap) = diagnostics(&params, ds, cfg)?;
            log.records.push(LogRecord {
                stage: 1,
                step: step + 1,
                ce,
                boda,
                joint,
                val_acc,
                alpha: ts.as_ref().map(|t| t.alpha),
                beta: ts.as_ref().map(|t| t.beta),
                gamma: ts.as_ref().map(|t| t.gamma),
                bound_gap: gap,
            });
        }
    }
    params.validate()?;
    Ok((params, log))
}

fn val_or_test(ds: &Dataset) -> &[Sample] {
    if ds.val.is_empty() {
        &ds.test
    } else {
        &ds.val
    }
}

/// Retrains the classifier on frozen representations, sampling pairs
/// uniformly among those with training data. Appends stage-2 records to `log`.
pub fn retrain_classifier(params: &ModelParams, ds: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<ModelParams> {
    cfg.validate()?;
    ensure!(!ds.train.is_empty(), "training set is empty");
    let mut params = params.clone();
    let (z, keys) = features(&params, &ds.train)?;
    let mut by_pair: std::collections::BTreeMap<DomainClassKey, Vec<usize>> = Default::default();
    for (i, k) in keys.iter().enumerate() {
        by_pair.entry(*k).or_default().push(i);
    }
    let pairs: Vec<Vec<usize>> = by_pair.into_values().collect();
    let domains = ds.train_indices_by_domain().iter().filter(|v| !v.is_empty()).count();
    let batch = cfg.batch_per_domain * domains;
    let mut rng = Rng::with_stream(cfg.seed, 2);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let last = params.layers.len() - 1;
    let mut zb = Mat::zeros(batch, cfg.repr);
    let mut labels = vec![0usize; batch];
    let mut window = Window::new();
    let base_step = params.step;

    for step in 0..cfg.decouple_steps {
        for r in 0..batch {
            let members = &pairs[rng.below(pairs.len())];
            let i = members[rng.below(members.len())];
            zb.row_mut(r).copy_from_slice(&z[i]);
            labels[r] = keys[i].class;
        }
        let logits = params.classify(&zb)?;
        let mut gw = Mat::zeros(params.layers[last].rows, params.layers[last].cols);
        let mut gb = vec![0.0; params.biases[last].len()];
        let mut ce = 0.0;
        for r in 0..batch {
            let (l, g) = ce_loss(logits.row(r), labels[r])?;
            ce += l;
            for (o, &go) in g.iter().enumerate() {
                let go = go / batch as f64;
                gb[o] += go;
                axpy(gw.row_mut(o), go, zb.row(r));
            }
        }
        ce /= batch as f64;
        check_finite(ce, "classifier loss", step)?;
        window.push(ce, 0.0, ce);
        opt.step(params.classifier_tensors_mut(), vec![gw.data.as_slice(), gb.as_slice()]);
        params.step = base_step + step + 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.decouple_steps {
            let (ce, _, joint) = window.take();
            let val_acc = evaluate_split(&params, ds, val_or_test(ds), ShotThresholds::default())?.average;
            log.records.push(LogRecord {
                stage: 2,
                step: base_step + step + 1,
                ce,
                boda: 0.0,
                joint,
                val_acc,
                alpha: None,
                beta: None,
                gamma: None,
                bound_gap: None,
            });
        }
    }
    params.validate()?;
    Ok(params)
}

/// Stage 1, then stage 2 when `cfg.decouple` is set.
pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let (params, mut log) = train(ds, cfg)?;
    if cfg.decouple {
        let params = retrain_classifier(&params, ds, cfg, &mut log)?;
        return Ok((params, log));
    }
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRanges {
    pub lr: (f64, f64),
    pub hidden: (usize, usize),
}

impl Default for SweepRanges {
    fn default() -> Self {
        SweepRanges { lr: (1e-5, 1e-2), hidden: (4, 128) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub trial: usize,
    pub config: TrainConfig,
    /// Average test accuracy over domains (percent).
    pub accuracy: f64,
    /// Statistics of the raw training features.
    pub stats: TransferStats,
    /// Statistics after normalising by the within-pair spread.
    pub normalized: TransferStats,
    /// `(β+γ)−α` of the normalised statistics.
    pub score: f64,
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.uniform(lo.ln(), hi.ln()).exp()
}

/// Trial configurations: learning rate and hidden widths drawn log-uniformly.
pub fn sweep_configs(base: &TrainConfig, n_trials: usize, ranges: &SweepRanges, seed: u64) -> Result<Vec<TrainConfig>> {
    ensure!(n_trials >= 1, "sweep needs at least one trial");
    ensure!(0.0 < ranges.lr.0 && ranges.lr.0 <= ranges.lr.1, "invalid lr range");
    ensure!(0 < ranges.hidden.0 && ranges.hidden.0 <= ranges.hidden.1, "invalid hidden range");
    let mut rng = Rng::new(seed);
    Ok((0..n_trials)
        .map(|t| {
            let lr = log_uniform(&mut rng, ranges.lr.0, ranges.lr.1);
            let (lo, hi) = (ranges.hidden.0 as f64, ranges.hidden.1 as f64);
            let hidden = base
                .hidden
                .iter()
                .map(|_| (log_uniform(&mut rng, lo, hi).round() as usize).clamp(ranges.hidden.0, ranges.hidden.1))
                .collect();
            TrainConfig { lr, hidden, seed: seed.wrapping_add(t as u64), ..base.clone() }
        })
        .collect())
}

/// Trains every trial, then measures test accuracy and the transferability
/// statistics of its training features. Trials run in parallel; output order
/// follows trial index.
pub fn sweep(ds: &Dataset, base: &TrainConfig, n_trials: usize, ranges: &SweepRanges, seed: u64) -> Result<Vec<SweepRecord>> {
    let configs = sweep_configs(base, n_trials, ranges, seed)?;
    configs
        .into_par_iter()
        .enumerate()
        .map(|(trial, config)| {
            let (params, _) = fit(ds, &config)?;
            let accuracy = accuracy_report(&params, ds, ShotThresholds::default())?.average;
            let stats = model_transfer_stats(&params, &ds.train, &config)?;
            let normalized = normalized_transfer_stats(&params, &ds.train, &config)?;
            Ok(SweepRecord { trial, score: normalized.separation_score(), config, accuracy, stats, normalized })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "trial", "seed", "lr", "hidden", "accuracy", "alpha", "beta", "gamma", "norm_alpha", "norm_beta", "norm_gamma", "score",
    ])?;
    for r in records {
        let hidden: Vec<String> = r.config.hidden.iter().map(|h| h.to_string()).collect();
        wtr.write_record([
            r.trial.to_string(),
            r.config.seed.to_string(),
            r.config.lr.to_string(),
            hidden.join("x"),
            r.accuracy.to_string(),
            r.stats.alpha.to_string(),
            r.stats.beta.to_string(),
            r.stats.gamma.to_string(),
            r.normalized.alpha.to_string(),
            r.normalized.beta.to_string(),
            r.normalized.gamma.to_string(),
            r.score.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
