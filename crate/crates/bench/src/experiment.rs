//! Running a sweep grid and emitting its result table.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slamkn::dataset::Dataset;
use slamkn::hybrid::Episode;

use crate::config::{Cell, DatasetConfig, Estimator, ExperimentSpec, SweepVariable};
use crate::error::{BenchError, Result};
use crate::estimators::{hex16, run_estimator, score, CellScore, CellStatus, ModelSet};

/// Result-table columns, in order.
pub const CSV_COLUMNS: [&str; 13] = [
    "experiment",
    "sweep_variable",
    "sweep_value",
    "estimator",
    "mu_db",
    "mu_db_per_element",
    "sigma_db",
    "sigma_linear",
    "trajectories",
    "failed",
    "status",
    "seed",
    "config_hash",
];

pub const SIGMA_DEFINITION: &str = "sigma_db: sample standard deviation of per-trajectory MSEs in dB; \
sigma_linear: sample standard deviation of per-trajectory linear MSEs";

/// One grid cell for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub sweep_variable: SweepVariable,
    pub sweep_value: f64,
    pub estimator: Estimator,
    pub seed: u64,
    pub trajectories: usize,
    pub score: CellScore,
    pub config_hash: String,
    pub model_fingerprint: String,
    pub runtime_s: f64,
}

impl Row {
    pub fn mu_db(&self) -> Option<f64> {
        self.score.mu_db()
    }

    fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mu = match self.score.status {
            CellStatus::Perfect => "perfect".to_string(),
            _ => opt(self.mu_db()),
        };
        let mu_el = match self.score.status {
            CellStatus::Perfect => "perfect".to_string(),
            _ => opt(self.score.report.as_ref().and_then(|r| r.mu_db_per_element)),
        };
        let status = serde_json::to_value(self.score.status).expect("serializable");
        vec![
            self.experiment.clone(),
            self.sweep_variable.name().to_string(),
            format!("{}", self.sweep_value),
            self.estimator.to_string(),
            mu,
            mu_el,
            opt(self.score.sigma_db()),
            opt(self.score.report.as_ref().map(|r| r.sigma_linear)),
            self.trajectories.to_string(),
            self.score.failed.to_string(),
            status.as_str().unwrap_or_default().to_string(),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub spec: ExperimentSpec,
    pub sigma_definition: String,
    pub csv_columns: Vec<String>,
    pub rows: Vec<Row>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<Row>,
    pub manifest: Manifest,
}

impl ExperimentResult {
    pub fn get(&self, sweep_value: f64, seed: u64, e: Estimator) -> Option<&Row> {
        self.rows.iter().find(|r| r.sweep_value == sweep_value && r.seed == seed && r.estimator == e)
    }
}

/// Hash identifying everything that determines a row: the generated test
/// data, the estimator and its parameters.
pub fn config_hash(dataset: &DatasetConfig, e: Estimator, fingerprint: &str) -> String {
    let canonical = serde_json::json!({
        "dataset": dataset,
        "estimator": e,
        "model": fingerprint,
        "version": env!("CARGO_PKG_VERSION"),
    });
    hex16(&Sha256::digest(canonical.to_string().as_bytes()))
}

fn run_cell(spec: &ExperimentSpec, cell: &Cell, models: &ModelSet) -> Result<Vec<Row>> {
    let ds = cell.dataset.generate(spec.execution)?;
    let mut rows = Vec::with_capacity(spec.estimators.len());
    for &e in &spec.estimators {
        let started = Instant::now();
        let outputs = run_estimator(e, &ds, models, spec.execution)?;
        let score = score(&ds, &outputs)?;
        let fingerprint = models.fingerprint(e);
        rows.push(Row {
            experiment: spec.name.clone(),
            sweep_variable: spec.sweep.variable,
            sweep_value: cell.sweep_value,
            estimator: e,
            seed: cell.seed,
            trajectories: ds.len(),
            score,
            config_hash: config_hash(&cell.dataset, e, &fingerprint),
            model_fingerprint: fingerprint,
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Runs every cell of `spec` against every estimator. Rows come back in grid
/// order whichever execution mode ran them.
pub fn run_experiment(spec: &ExperimentSpec, models: &ModelSet) -> Result<ExperimentResult> {
    spec.validate()?;
    models.check(&spec.estimators, spec.dataset.scenario.landmarks)?;
    let started = Instant::now();
    let cells = spec.cells()?;
    let per_cell = spec.execution.map(&cells, |_, cell| run_cell(spec, cell, models));
    let mut rows = Vec::new();
    for r in per_cell {
        rows.extend(r?);
    }
    let manifest = Manifest {
        tool: "slamkn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        spec: spec.clone(),
        sigma_definition: SIGMA_DEFINITION.into(),
        csv_columns: CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: rows.clone(),
        runtime_s: started.elapsed().as_secs_f64(),
    };
    Ok(ExperimentResult { rows, manifest })
}

pub fn write_csv<W: Write>(rows: &[Row], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let to_err = |e: csv::Error| BenchError::io("<csv>", std::io::Error::other(e));
    out.write_record(CSV_COLUMNS).map_err(to_err)?;
    for r in rows {
        out.write_record(r.csv_record()).map_err(to_err)?;
    }
    out.flush().map_err(|e| BenchError::io("<csv>", e))?;
    Ok(())
}

/// Per-step truth and estimates of one trajectory as plot-ready CSV rows:
/// `source, t, x, y, theta, lm0_x, lm0_y, ...`. Step 0 is the initial state.
pub fn write_trace<W: Write>(ds: &Dataset, index: usize, estimates: &[(Estimator, Vec<DVector<f64>>)], w: W) -> Result<()> {
    let traj = ds
        .trajectories
        .get(index)
        .ok_or_else(|| BenchError::invalid("trajectory", format!("index {index} out of range ({} trajectories)", ds.len())))?;
    let ep = Episode::from_trajectory(traj)?;
    let m = ds.landmark_count();
    let mut header = vec!["source".to_string(), "t".into(), "x".into(), "y".into(), "theta".into()];
    for k in 0..m {
        header.push(format!("lm{k}_x"));
        header.push(format!("lm{k}_y"));
    }
    let mut out = csv::Writer::from_writer(w);
    let to_err = |e: csv::Error| BenchError::io("<csv>", std::io::Error::other(e));
    out.write_record(&header).map_err(to_err)?;
    let mut emit = |source: &str, t: usize, x: &DVector<f64>| -> Result<()> {
        let mut rec = vec![source.to_string(), t.to_string()];
        rec.extend(x.iter().map(|v| format!("{v}")));
        out.write_record(&rec).map_err(to_err)
    };
    emit("truth", 0, &DVector::from_column_slice(&traj.initial_state))?;
    for (t, x) in ep.seq.truth.iter().enumerate() {
        emit("truth", t + 1, x)?;
    }
    for (e, xs) in estimates {
        emit(&e.to_string(), 0, &ep.init)?;
        for (t, x) in xs.iter().enumerate() {
            emit(&e.to_string(), t + 1, x)?;
        }
    }
    out.flush().map_err(|e| BenchError::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use slamkn::par::Execution;

    fn small_table2() -> ExperimentSpec {
        let mut s = ExperimentSpec::table2(6, 4);
        s.estimators = vec![Estimator::A1, Estimator::A2];
        s.seeds = vec![4, 5];
        s
    }

    #[test]
    fn rows_follow_grid_order() {
        let r = run_experiment(&small_table2(), &ModelSet::default()).unwrap();
        assert_eq!(r.rows.len(), 6 * 2 * 2);
        let keys: Vec<(f64, u64, Estimator)> = r.rows.iter().map(|x| (x.sweep_value, x.seed, x.estimator)).collect();
        assert_eq!(keys[0], (15.0, 4, Estimator::A1));
        assert_eq!(keys[1], (15.0, 4, Estimator::A2));
        assert_eq!(keys[2], (15.0, 5, Estimator::A1));
        assert_eq!(keys[4], (20.0, 4, Estimator::A1));
    }

    #[test]
    fn execution_modes_agree() {
        let mut s = small_table2();
        s.execution = Execution::Sequential;
        let a = run_experiment(&s, &ModelSet::default()).unwrap();
        s.execution = Execution::Parallel;
        let b = run_experiment(&s, &ModelSet::default()).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.score, y.score);
            assert_eq!(x.config_hash, y.config_hash);
        }
    }

    #[test]
    fn hashes_distinguish_cells_and_estimators() {
        let r = run_experiment(&small_table2(), &ModelSet::default()).unwrap();
        let mut hashes: Vec<&str> = r.rows.iter().map(|x| x.config_hash.as_str()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), r.rows.len());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = run_experiment(&small_table2(), &ModelSet::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&r.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), r.rows.len());
    }

    #[test]
    fn trace_lists_truth_then_estimates() {
        let ds = ExperimentSpec::table2(2, 1).dataset.generate(Execution::Sequential).unwrap();
        let out = run_estimator(Estimator::A1, &ds, &ModelSet::default(), Execution::Sequential).unwrap();
        let est = out.into_iter().next().unwrap().unwrap();
        let mut buf = Vec::new();
        write_trace(&ds, 0, &[(Estimator::A1, est)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("source,t,x,y,theta,lm0_x,lm0_y"));
        assert_eq!(text.lines().count(), 1 + 2 * 51);
        assert!(write_trace(&ds, 9, &[], Vec::new()).is_err());
    }
}
