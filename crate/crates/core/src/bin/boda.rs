//! Batch command-line entry point. Every command writes files plus a
//! manifest; exit codes are 0 (ok), 2 (invalid input), 3 (numerical failure).

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use boda::datagen::{generate, Dataset, DatasetSpec};
use boda::eval::{accuracy_report, stats_accuracy_correlation, ShotThresholds};
use boda::io::{manifest_path, read_json, write_atomic, write_json, RunManifest};
use boda::losses::verify_bound;
use boda::model::ModelParams;
use boda::stats::{build_graph, compute_stats, group, mds_2d, transfer_stats, Metric, TransferStats};
use boda::trainer::{features, fit, sweep, write_sweep_csv, SweepRanges, TrainConfig};
use boda::{gradcheck, Error, Result};

/// Gap below which a violated bound counts as an implementation bug.
const BOUND_SLACK: f64 = -1e-9;

#[derive(Parser)]
#[command(name = "boda", version, about = "Balanced domain-class alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint, log, test report and manifest into `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transferability graph, statistics and 2-D embedding of a checkpoint's training features.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
    },
    /// Compare the summed alignment loss on training features with its lower bound.
    VerifyBound {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        /// Check the calibrated loss against the calibrated bound.
        #[arg(long)]
        calibrated: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient and of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random loss instances.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random learning-rate/width sweep, relating transferability statistics to accuracy.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Outcome of a command that ran to completion but found a failed check.
struct CheckFailed(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(CheckFailed(msg))) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BODA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::validation(format!("BODA_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("cannot configure thread pool: {e}")))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::validation(format!("cannot open dataset {}: {e}", path.display())))?;
    Dataset::read_csv(f)
}

fn read_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_json(p).map_err(|e| Error::validation(format!("config {}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    ModelParams::from_json(&text)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn finish(mut m: RunManifest, start: Instant, at: PathBuf) -> Result<()> {
    m.duration_secs = start.elapsed().as_secs_f64();
    write_json(&at, &m)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn run(cmd: Command) -> Result<Option<CheckFailed>> {
    let start = Instant::now();
    match cmd {
        Command::Gen { spec, out, seed } => {
            let mut s: DatasetSpec =
                read_json(&spec).map_err(|e| Error::validation(format!("spec {}: {e}", spec.display())))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let ds = generate(&s)?;
            write_atomic(&out, &csv_bytes(|b| ds.write_csv(b))?)?;
            let m = RunManifest {
                config: to_value(&s)?,
                inputs: vec![path_str(&spec)],
                outputs: vec![path_str(&out)],
                seed: Some(s.seed),
                ..RunManifest::new("gen")
            };
            finish(m, start, manifest_path(&out, false))?;
            println!("wrote {} ({} train, {} val, {} test rows)", out.display(), ds.train.len(), ds.val.len(), ds.test.len());
            Ok(None)
        }
        Command::Train { data, config, out, seed } => {
            let cfg = read_config(config.as_deref(), seed)?;
            let ds = read_dataset(&data)?;
            let (params, log) = fit(&ds, &cfg)?;
            let report = accuracy_report(&params, &ds, ShotThresholds::default())?;
            let ckpt = out.join("checkpoint.json");
            let log_csv = out.join("log.csv");
            let report_json = out.join("report.json");
            write_atomic(&ckpt, params.to_json()?.as_bytes())?;
            write_atomic(&log_csv, &csv_bytes(|b| log.write_csv(b))?)?;
            write_json(&report_json, &report)?;
            let mut inputs = vec![path_str(&data)];
            inputs.extend(config.as_deref().map(path_str));
            let m = RunManifest {
                config: to_value(&cfg)?,
                inputs,
                outputs: vec![path_str(&ckpt), path_str(&log_csv), path_str(&report_json)],
                seed: Some(cfg.seed),
                ..RunManifest::new("train")
            };
            finish(m, start, manifest_path(&out, true))?;
            println!("average test accuracy {:.2}% (worst domain {:.2}%)", report.average, report.worst);
            Ok(None)
        }
        Command::Analyze { checkpoint, data, out, nu } => {
            let params = read_checkpoint(&checkpoint)?;
            let ds = read_dataset(&data)?;
            if ds.num_domains < 2 {
                return Err(Error::validation(format!(
                    "analysis needs at least 2 domains, dataset has {}",
                    ds.num_domains
                )));
            }
            let (z, keys) = features(&params, &ds.train)?;
            let groups = group(&keys, &z);
            let store = compute_stats(&groups)?;
            let graph = build_graph(&store, &groups, Metric::Euclid)?;
            let stats: TransferStats = transfer_stats(&graph, Some(nu), &store.counts())?;
            let points = mds_2d(&graph)?;

            let graph_json = out.join("graph.json");
            let stats_json = out.join("stats.json");
            let mds_csv = out.join("mds.csv");
            write_json(&graph_json, &graph.to_json())?;
            write_json(&stats_json, &stats)?;
            write_atomic(
                &mds_csv,
                &csv_bytes(|b| {
                    let mut w = csv::Writer::from_writer(b);
                    w.write_record(["domain", "class", "x", "y"])?;
                    for p in &points {
                        w.write_record([p.key.domain.to_string(), p.key.class.to_string(), p.x.to_string(), p.y.to_string()])?;
                    }
                    w.flush()?;
                    Ok(())
                })?,
            )?;
            let m = RunManifest {
                config: serde_json::json!({ "nu": nu, "metric": "euclid", "split": "train" }),
                inputs: vec![path_str(&checkpoint), path_str(&data)],
                outputs: vec![path_str(&graph_json), path_str(&stats_json), path_str(&mds_csv)],
                ..RunManifest::new("analyze")
            };
            finish(m, start, manifest_path(&out, true))?;
            println!(
                "{} pairs; alpha {:.4} beta {:.4} gamma {:.4}",
                graph.len(),
                stats.alpha,
                stats.beta,
                stats.gamma
            );
            Ok(None)
        }
        Command::VerifyBound { checkpoint, data, nu, calibrated, out } => {
            let params = read_checkpoint(&checkpoint)?;
            let ds = read_dataset(&data)?;
            let (z, keys) = features(&params, &ds.train)?;
            let store = compute_stats(&group(&keys, &z))?;
            let report = verify_bound(&z, &keys, &store, Metric::Euclid, nu, calibrated)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = &out {
                write_json(out, &report)?;
                let m = RunManifest {
                    config: serde_json::json!({ "nu": nu, "calibrated": calibrated, "split": "train" }),
                    inputs: vec![path_str(&checkpoint), path_str(&data)],
                    outputs: vec![path_str(out)],
                    ..RunManifest::new("verify-bound")
                };
                finish(m, start, manifest_path(out, false))?;
            }
            if report.complete_grid && report.gap < BOUND_SLACK {
                return Ok(Some(CheckFailed(format!("bound violated by {:e}", -report.gap))));
            }
            Ok(None)
        }
        Command::Gradcheck { seed, trials, out } => {
            let report = gradcheck::run(seed, trials, 1)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = &out {
                write_json(out, &report)?;
                let m = RunManifest {
                    config: serde_json::json!({ "instances": trials, "tolerance": report.tolerance }),
                    outputs: vec![path_str(out)],
                    seed: Some(seed),
                    ..RunManifest::new("gradcheck")
                };
                finish(m, start, manifest_path(out, false))?;
            }
            if !report.passed {
                return Ok(Some(CheckFailed(format!("relative error above {:e}", report.tolerance))));
            }
            Ok(None)
        }
        Command::Sweep { data, config, trials, out, seed } => {
            let base = read_config(config.as_deref(), seed)?;
            let ds = read_dataset(&data)?;
            let ranges = SweepRanges::default();
            let records = sweep(&ds, &base, trials, &ranges, base.seed)?;
            let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
            let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
            let corr = stats_accuracy_correlation(&scores, &accs)?;

            let trials_csv = out.join("trials.csv");
            let corr_json = out.join("correlation.json");
            write_atomic(&trials_csv, &csv_bytes(|b| write_sweep_csv(&records, b))?)?;
            write_json(&corr_json, &corr)?;
            let mut inputs = vec![path_str(&data)];
            inputs.extend(config.as_deref().map(path_str));
            let m = RunManifest {
                config: serde_json::json!({ "base": to_value(&base)?, "trials": trials, "ranges": to_value(&ranges)? }),
                inputs,
                outputs: vec![path_str(&trials_csv), path_str(&corr_json)],
                seed: Some(base.seed),
                ..RunManifest::new("sweep")
            };
            finish(m, start, manifest_path(&out, true))?;
            println!("{trials} trials; spearman {:.3} pearson {:.3}", corr.spearman, corr.pearson);
            Ok(None)
        }
    }
}
