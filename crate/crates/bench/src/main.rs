use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use slamkn::dataset::save_dataset;
use slamkn::kalmannet::train_a3;
use slamkn::split::train_a4;
use slamkn_bench::config::{load_json, DatasetConfig, Estimator, EvaluateRequest, ExperimentSpec, TrainRequest};
use slamkn_bench::error::{BenchError, Result};
use slamkn_bench::estimators::{run_estimator, score, ModelSet};
use slamkn_bench::experiment::{config_hash, run_experiment, write_csv, write_trace, Row};

#[derive(Parser)]
#[command(name = "slamkn", version, about = "Generate SLAM datasets, train learned-gain filters and benchmark estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (or directory for `sweep`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset from a dataset config.
    Generate,
    /// Train an A3 or A4 model and write its checkpoint.
    Train,
    /// Run one estimator on one dataset.
    Evaluate {
        /// Also write per-step truth and estimates of one trajectory as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Trajectory written by `--trace`.
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
    },
    /// Run an experiment grid, writing `results.csv` and `manifest.json`.
    Sweep,
    /// Print the metadata of a dataset or checkpoint file.
    Inspect {
        /// File to inspect (alternatively `--config`).
        path: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": msg.trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            let code = if matches!(e, BenchError::Config { .. } | BenchError::Invalid { .. }) { 2 } else { 1 };
            ExitCode::from(code)
        }
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| BenchError::invalid(flag, format!("`{flag}` is required for this subcommand")))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| BenchError::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| BenchError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate => {
            let config = require(&cli.config, "--config")?;
            let out = require(&cli.out, "--out")?;
            let cfg: DatasetConfig = load_json(config)?;
            let ds = cfg.with_seed(cli.seed).generate(Default::default())?;
            create_parent(out)?;
            save_dataset(&ds, out).map_err(|e| match e {
                slamkn::Error::Io(io) => BenchError::io(out, io),
                other => other.into(),
            })?;
            println!("{}", json!({ "wrote": out, "trajectories": ds.len(), "seed": ds.meta.seed }));
        }
        Command::Train => {
            let config = require(&cli.config, "--config")?;
            let out = require(&cli.out, "--out")?;
            let mut req: TrainRequest = load_json(config)?;
            let ds = req.dataset.resolve(&base_dir(config), None, Default::default())?;
            create_parent(out)?;
            let log = match req.estimator {
                Estimator::A3 => {
                    if let Some(s) = cli.seed {
                        req.kalmannet.train.seed = s;
                    }
                    let (model, log) = train_a3(&ds, &req.kalmannet)?;
                    model.save(out)?;
                    log
                }
                Estimator::A4 => {
                    if let Some(s) = cli.seed {
                        req.split.train.seed = s;
                    }
                    let (model, log) = train_a4(&ds, &req.split)?;
                    model.save(out)?;
                    log
                }
                e => return Err(BenchError::invalid("estimator", format!("{e} has no trainable parameters"))),
            };
            let log_path = PathBuf::from(format!("{}.log.json", out.display()));
            write_json(&log_path, &json!({ "request": req, "log": log }))?;
            println!(
                "{}",
                json!({ "wrote": out, "log": log_path, "best_val_loss": log.best_val_loss, "epochs": log.records.len() })
            );
        }
        Command::Evaluate { trace, trajectory } => {
            let config = require(&cli.config, "--config")?;
            let req: EvaluateRequest = load_json(config)?;
            let base = base_dir(config);
            let ds = req.dataset.resolve(&base, cli.seed, req.execution)?;
            let mut paths = slamkn_bench::config::ModelPaths::default();
            match req.estimator {
                Estimator::A3 => paths.a3 = req.checkpoint.clone(),
                Estimator::A4 => paths.a4 = req.checkpoint.clone(),
                _ => {}
            }
            let models = ModelSet::load(&paths, &base, &[req.estimator])?;
            let outputs = run_estimator(req.estimator, &ds, &models, req.execution)?;
            let s = score(&ds, &outputs)?;
            let fingerprint = models.fingerprint(req.estimator);
            let dataset_cfg = DatasetConfig { scenario: ds.meta.scenario.clone(), noise: ds.meta.noise };
            let row = Row {
                experiment: "evaluate".into(),
                sweep_variable: slamkn_bench::config::SweepVariable::PSwitch,
                sweep_value: ds.meta.scenario.p_switch,
                estimator: req.estimator,
                seed: ds.meta.seed,
                trajectories: ds.len(),
                score: s,
                config_hash: config_hash(&dataset_cfg, req.estimator, &fingerprint),
                model_fingerprint: fingerprint,
                runtime_s: 0.0,
            };
            if let Some(out) = &cli.out {
                create_parent(out)?;
                let f = std::fs::File::create(out).map_err(|e| BenchError::io(out, e))?;
                write_csv(std::slice::from_ref(&row), f)?;
            }
            if let Some(path) = &trace {
                let est = match outputs.get(trajectory) {
                    Some(Ok(est)) => vec![(req.estimator, est.clone())],
                    _ => Vec::new(),
                };
                create_parent(path)?;
                let f = std::fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
                write_trace(&ds, trajectory, &est, f)?;
            }
            println!(
                "{}",
                json!({
                    "estimator": row.estimator,
                    "status": row.score.status,
                    "mu_db": row.score.mu_db(),
                    "mu_db_per_element": row.score.report.as_ref().and_then(|r| r.mu_db_per_element),
                    "sigma_db": row.score.sigma_db(),
                    "trajectories": row.trajectories,
                    "failed": row.score.failed,
                    "config_hash": row.config_hash,
                })
            );
        }
        Command::Sweep => {
            let config = require(&cli.config, "--config")?;
            let mut spec: ExperimentSpec = load_json(config)?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let base = base_dir(config);
            let out = cli.out.clone().or_else(|| spec.output.as_ref().map(|p| base.join(p)));
            let out = require(&out, "--out")?.to_path_buf();
            spec.validate()?;
            let models = ModelSet::load(&spec.models, &base, &spec.estimators)?;
            let result = run_experiment(&spec, &models)?;
            std::fs::create_dir_all(&out).map_err(|e| BenchError::io(&out, e))?;
            let csv_path = out.join("results.csv");
            let f = std::fs::File::create(&csv_path).map_err(|e| BenchError::io(&csv_path, e))?;
            write_csv(&result.rows, f)?;
            write_json(&out.join("manifest.json"), &result.manifest)?;
            println!("{}", json!({ "wrote": csv_path, "rows": result.rows.len() }));
        }
        Command::Inspect { path } => {
            let path = match (&path, &cli.config) {
                (Some(p), _) | (None, Some(p)) => p.clone(),
                (None, None) => return Err(BenchError::invalid("path", "give a file to inspect")),
            };
            let info = inspect(&path)?;
            match &cli.out {
                Some(out) => write_json(out, &info)?,
                None => println!("{}", serde_json::to_string_pretty(&info).expect("serializable")),
            }
        }
    }
    Ok(())
}

/// Header of a dataset or checkpoint file, without reading its payload.
fn inspect(path: &Path) -> Result<serde_json::Value> {
    let f = std::fs::File::open(path).map_err(|e| BenchError::io(path, e))?;
    let mut first = Vec::new();
    BufReader::new(f).read_until(b'\n', &mut first).map_err(|e| BenchError::io(path, e))?;
    let header: serde_json::Value = serde_json::from_slice(&first).map_err(|e| {
        BenchError::Core(slamkn::Error::Format { record: 0, reason: format!("not a dataset or checkpoint header: {e}") })
    })?;
    let kind = match header.get("format").and_then(|v| v.as_str()) {
        Some("slamkn-dataset") => "dataset",
        Some("slamkn-checkpoint") => "checkpoint",
        _ => {
            return Err(BenchError::Core(slamkn::Error::Format {
                record: 0,
                reason: "unknown file format".into(),
            }))
        }
    };
    Ok(json!({ "path": path, "kind": kind, "header": header }))
}
