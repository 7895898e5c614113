//! JSON configuration files: datasets, training requests, single evaluations
//! and sweep experiments.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slamkn::dataset::{generate_dataset_with, load_dataset, Dataset, NoiseConfig, NoiseSpec, ScenarioConfig};
use slamkn::kalmannet::KalmanNetConfig;
use slamkn::par::Execution;
use slamkn::split::SplitConfig;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// EKF with the statistics that generated the data.
    A1,
    /// EKF with fixed, predetermined statistics.
    A2,
    /// Learned-gain filter.
    A3,
    /// Split learned-gain filter.
    A4,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::A1, Estimator::A2, Estimator::A3, Estimator::A4];

    pub fn is_learned(self) -> bool {
        matches!(self, Estimator::A3 | Estimator::A4)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Everything needed to generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenario: ScenarioConfig,
    pub noise: NoiseSpec,
}

impl DatasetConfig {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scenario.seed = s;
        }
        self
    }

    pub fn generate(&self, exec: Execution) -> Result<Dataset> {
        Ok(generate_dataset_with(&self.scenario, &self.noise, exec)?)
    }
}

/// A dataset file path, or an inline generation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    File(PathBuf),
    Inline(DatasetConfig),
}

impl DatasetRef {
    /// Loads or generates. `seed` only applies to inline configs; paths are
    /// taken relative to `base`.
    pub fn resolve(&self, base: &Path, seed: Option<u64>, exec: Execution) -> Result<Dataset> {
        match self {
            DatasetRef::File(p) => {
                let path = base.join(p);
                load_dataset(&path).map_err(|e| match e {
                    slamkn::Error::Io(io) => BenchError::io(path, io),
                    other => BenchError::Core(other),
                })
            }
            DatasetRef::Inline(cfg) => cfg.clone().with_seed(seed).generate(exec),
        }
    }
}

/// The quantity varied across an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// `1/σ_v²` in dB.
    InvSigmaV2Db,
    /// `1/σ_w²` in dB.
    InvSigmaW2Db,
    /// `r²` in dB.
    R2Db,
    /// `q²` in dB.
    Q2Db,
    /// Association-error probability.
    PSwitch,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::InvSigmaV2Db => "inv_sigma_v2_db",
            SweepVariable::InvSigmaW2Db => "inv_sigma_w2_db",
            SweepVariable::R2Db => "r2_db",
            SweepVariable::Q2Db => "q2_db",
            SweepVariable::PSwitch => "p_switch",
        }
    }

    /// The dataset config of one grid cell.
    pub fn apply(self, value: f64, base: &DatasetConfig) -> Result<DatasetConfig> {
        let mut cfg = base.clone();
        if self == SweepVariable::PSwitch {
            cfg.scenario.p_switch = value;
            return Ok(cfg);
        }
        let NoiseSpec::Fixed(noise) = &mut cfg.noise else {
            return Err(BenchError::invalid("dataset.noise", "noise sweeps need a fixed noise config"));
        };
        let from_db = |db: f64| 10f64.powf(db / 10.0);
        match self {
            SweepVariable::InvSigmaV2Db => noise.sigma_v2 = 1.0 / from_db(value),
            SweepVariable::InvSigmaW2Db => noise.sigma_w2 = 1.0 / from_db(value),
            SweepVariable::R2Db => noise.r2 = from_db(value),
            SweepVariable::Q2Db => noise.q2 = from_db(value),
            SweepVariable::PSwitch => unreachable!(),
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

/// Checkpoints for the learned estimators, relative to the spec file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a3: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a4: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A grid of test datasets crossed with a set of estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub estimators: Vec<Estimator>,
    /// Test dataset before the sweep variable is applied. Its seed is
    /// replaced by each entry of `seeds`.
    pub dataset: DatasetConfig,
    pub sweep: Sweep,
    #[serde(default)]
    pub models: ModelPaths,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub execution: Execution,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// One dataset of an experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub sweep_value: f64,
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(BenchError::invalid("estimators", "at least one estimator is required"));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return Err(BenchError::invalid("estimators", format!("{e} listed twice")));
            }
        }
        if self.sweep.values.is_empty() {
            return Err(BenchError::invalid("sweep.values", "the grid is empty"));
        }
        if let Some(v) = self.sweep.values.iter().find(|v| !v.is_finite()) {
            return Err(BenchError::invalid("sweep.values", format!("{v} is not finite")));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::invalid("seeds", "at least one seed is required"));
        }
        for cell in self.cells()? {
            cell.dataset.scenario.validate().map_err(|e| BenchError::invalid("dataset", e.to_string()))?;
            if let NoiseSpec::Fixed(n) = cell.dataset.noise {
                n.validate().map_err(|e| {
                    BenchError::invalid("sweep.values", format!("{} = {}: {e}", self.sweep.variable.name(), cell.sweep_value))
                })?;
            }
        }
        Ok(())
    }

    /// Grid cells in output order: sweep values outer, seeds inner.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for &v in &self.sweep.values {
            for &seed in &self.seeds {
                let dataset = self.sweep.variable.apply(v, &self.dataset)?.with_seed(Some(seed));
                out.push(Cell { sweep_value: v, seed, dataset });
            }
        }
        Ok(out)
    }

    fn mismatch(name: &str, estimators: Vec<Estimator>, sweep: Sweep, landmarks: usize, noise: NoiseConfig, l: usize, seed: u64) -> Self {
        let scenario = ScenarioConfig { landmarks, ..ScenarioConfig::d2(l, seed) };
        ExperimentSpec {
            name: name.into(),
            estimators,
            dataset: DatasetConfig { scenario, noise: NoiseSpec::Fixed(noise) },
            sweep,
            models: ModelPaths { a3: Some("../models/a3.ckpt".into()), a4: Some("../models/a4.ckpt".into()) },
            seeds: vec![seed],
            execution: Execution::default(),
            output: None,
        }
    }

    /// Observation-noise sweep: `q² = 10`, `r² = 10³`, `σ_w² = 10⁻³`.
    pub fn table2(l: usize, seed: u64) -> Self {
        let noise = NoiseConfig { sigma_w2: 1e-3, sigma_v2: 1e-3, q2: 10.0, r2: 1e3 };
        let sweep = Sweep { variable: SweepVariable::InvSigmaV2Db, values: vec![15.0, 20.0, 25.0, 30.0, 35.0, 40.0] };
        Self::mismatch("table2", Estimator::ALL.to_vec(), sweep, 5, noise, l, seed)
    }

    /// Heterogeneity sweep over `r²`: `σ_v² = σ_w² = 10⁻³`, `q² = 10`.
    pub fn table3(l: usize, seed: u64) -> Self {
        let noise = NoiseConfig { sigma_w2: 1e-3, sigma_v2: 1e-3, q2: 10.0, r2: 1e3 };
        let sweep = Sweep { variable: SweepVariable::R2Db, values: vec![20.0, 25.0, 30.0, 35.0, 40.0] };
        Self::mismatch("table3", Estimator::ALL.to_vec(), sweep, 5, noise, l, seed)
    }

    /// Association-error sweep with ten landmarks: `σ² = 10⁻⁴`, `q² = r² = 1`.
    pub fn table4(l: usize, seed: u64) -> Self {
        let noise = NoiseConfig { sigma_w2: 1e-4, sigma_v2: 1e-4, q2: 1.0, r2: 1.0 };
        let sweep = Sweep { variable: SweepVariable::PSwitch, values: vec![0.01, 0.03, 0.05] };
        let mut spec = Self::mismatch(
            "table4",
            vec![Estimator::A1, Estimator::A3, Estimator::A4],
            sweep,
            10,
            noise,
            l,
            seed,
        );
        spec.models = ModelPaths { a3: Some("../models/a3_m10.ckpt".into()), a4: Some("../models/a4_m10.ckpt".into()) };
        spec
    }
}

/// `train` subcommand input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub estimator: Estimator,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub kalmannet: KalmanNetConfig,
    #[serde(default)]
    pub split: SplitConfig,
}

/// `evaluate` subcommand input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub estimator: Estimator,
    pub dataset: DatasetRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub execution: Execution,
}

/// Parses a JSON config file, reporting schema errors with line and column.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    parse_json(&text, path)
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| BenchError::Config {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_grids() {
        let t2 = ExperimentSpec::table2(1000, 1);
        assert_eq!(t2.cells().unwrap().len(), 6);
        t2.validate().unwrap();
        let c = &t2.cells().unwrap()[3];
        let NoiseSpec::Fixed(n) = c.dataset.noise else { panic!() };
        assert!((n.sigma_v2 - 1e-3).abs() < 1e-15);
        assert_eq!(ExperimentSpec::table3(1000, 1).cells().unwrap().len(), 5);
        let t4 = ExperimentSpec::table4(1000, 1);
        assert_eq!(t4.estimators.len(), 3);
        assert_eq!(t4.cells().unwrap()[2].dataset.scenario.p_switch, 0.05);
        assert_eq!(t4.dataset.scenario.landmarks, 10);
    }

    #[test]
    fn r2_sweep_sets_heterogeneity() {
        let c = SweepVariable::R2Db.apply(40.0, &ExperimentSpec::table3(10, 0).dataset).unwrap();
        let NoiseSpec::Fixed(n) = c.noise else { panic!() };
        assert!((n.r2 - 1e4).abs() < 1e-9);
    }

    #[test]
    fn validation_rejects_empty_or_duplicate() {
        let mut s = ExperimentSpec::table2(10, 0);
        s.sweep.values.clear();
        assert!(matches!(s.validate(), Err(BenchError::Invalid { ref field, .. }) if field == "sweep.values"));
        let mut s = ExperimentSpec::table2(10, 0);
        s.estimators.push(Estimator::A1);
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::table2(10, 0);
        s.dataset.noise = NoiseSpec::training();
        assert!(s.validate().is_err());
    }

    #[test]
    fn schema_errors_carry_position() {
        let err = parse_json::<ExperimentSpec>("{\n  \"name\": \"x\",\n  \"bogus\": 1\n}", Path::new("s.json")).unwrap_err();
        match err {
            BenchError::Config { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = ExperimentSpec::table4(100, 3);
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(parse_json::<ExperimentSpec>(&text, Path::new("-")).unwrap(), s);
    }
}
