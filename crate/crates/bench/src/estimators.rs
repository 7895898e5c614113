//! Binding estimator labels to runnable filters and scoring their output.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slamkn::dataset::{Dataset, NoiseConfig};
use slamkn::ekf::{run_trajectory, NoiseMatrices};
use slamkn::hybrid::Episode;
use slamkn::kalmannet::{evaluate_a3, KalmanNetModel};
use slamkn::metrics::{summarize, trajectory_error, MseReport};
use slamkn::par::Execution;
use slamkn::split::{evaluate_a4, SplitGainModel};

use crate::config::{Estimator, ModelPaths};
use crate::error::{BenchError, Result};

/// The predetermined statistics assumed by A2, whatever generated the data.
pub const A2_NOISE: NoiseConfig = NoiseConfig { sigma_w2: 1e-3, sigma_v2: 1e-3, q2: 10.0, r2: 1e2 };

/// Trained models available to an experiment.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub a3: Option<KalmanNetModel>,
    pub a4: Option<SplitGainModel>,
}

impl ModelSet {
    /// Loads the checkpoints the listed estimators need.
    pub fn load(paths: &ModelPaths, base: &Path, needed: &[Estimator]) -> Result<Self> {
        let mut set = ModelSet::default();
        let missing = |e: Estimator, msg: String| BenchError::Resolution { estimator: e.to_string(), message: msg };
        if needed.contains(&Estimator::A3) {
            let p = paths.a3.as_ref().ok_or_else(|| missing(Estimator::A3, "no `models.a3` checkpoint given".into()))?;
            let p = base.join(p);
            set.a3 = Some(KalmanNetModel::load(&p).map_err(|e| missing(Estimator::A3, format!("{}: {e}", p.display())))?);
        }
        if needed.contains(&Estimator::A4) {
            let p = paths.a4.as_ref().ok_or_else(|| missing(Estimator::A4, "no `models.a4` checkpoint given".into()))?;
            let p = base.join(p);
            set.a4 = Some(SplitGainModel::load(&p).map_err(|e| missing(Estimator::A4, format!("{}: {e}", p.display())))?);
        }
        Ok(set)
    }

    /// Fails unless every learned estimator has a model sized for `landmarks`.
    pub fn check(&self, needed: &[Estimator], landmarks: usize) -> Result<()> {
        let n = 3 + 2 * landmarks;
        for &e in needed {
            let dims = match e {
                Estimator::A3 => self.a3.as_ref().map(|m| m.state_dim),
                Estimator::A4 => self.a4.as_ref().map(|m| m.state_dim),
                _ => continue,
            };
            match dims {
                None => {
                    return Err(BenchError::Resolution { estimator: e.to_string(), message: "no trained model".into() })
                }
                Some(d) if d != n => {
                    return Err(BenchError::Resolution {
                        estimator: e.to_string(),
                        message: format!("model has state dimension {d}, data needs {n} ({landmarks} landmarks)"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Short hash of the model parameters and feature statistics, or of the
    /// fixed statistics for the model-based estimators.
    pub fn fingerprint(&self, e: Estimator) -> String {
        let mut h = Sha256::new();
        h.update(e.to_string().as_bytes());
        match e {
            Estimator::A1 => {}
            Estimator::A2 => h.update(serde_json::to_vec(&A2_NOISE).expect("serializable")),
            Estimator::A3 => {
                if let Some(m) = &self.a3 {
                    feed_params(&mut h, &m.gain_net.to_flat());
                    h.update(serde_json::to_vec(&m.norm).expect("serializable"));
                }
            }
            Estimator::A4 => {
                if let Some(m) = &self.a4 {
                    feed_params(&mut h, &m.g1_net.to_flat());
                    feed_params(&mut h, &m.g2_net.to_flat());
                    h.update(serde_json::to_vec(&(&m.routing, &m.g1_norm, &m.g2_norm)).expect("serializable"));
                }
            }
        }
        hex16(&h.finalize())
    }
}

fn feed_params(h: &mut Sha256, p: &[f64]) {
    for x in p {
        h.update(x.to_le_bytes());
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Posterior means of `e` on every trajectory, in dataset order.
pub fn run_estimator(
    e: Estimator,
    ds: &Dataset,
    models: &ModelSet,
    exec: Execution,
) -> Result<Vec<slamkn::Result<Vec<DVector<f64>>>>> {
    models.check(&[e], ds.landmark_count())?;
    let m = ds.landmark_count();
    Ok(match e {
        Estimator::A1 => exec.map(&ds.trajectories, |_, t| run_trajectory(t, &NoiseMatrices::exact_for(t)).map(|r| r.means)),
        Estimator::A2 => {
            let nm = NoiseMatrices::from_config(&A2_NOISE, m);
            exec.map(&ds.trajectories, |_, t| run_trajectory(t, &nm).map(|r| r.means))
        }
        Estimator::A3 => evaluate_a3(models.a3.as_ref().expect("checked"), ds, exec),
        Estimator::A4 => evaluate_a4(models.a4.as_ref().expect("checked"), ds, exec),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// Zero total error.
    Perfect,
    /// Some trajectories diverged; the metric covers the rest.
    Partial,
    /// Every trajectory diverged.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub status: CellStatus,
    /// `None` only when every trajectory diverged.
    pub report: Option<MseReport>,
    pub failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl CellScore {
    pub fn mu_db(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.mu_db)
    }

    pub fn sigma_db(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.sigma_db)
    }
}

/// Scores estimator output against the dataset's ground truth.
pub fn score(ds: &Dataset, outputs: &[slamkn::Result<Vec<DVector<f64>>>]) -> Result<CellScore> {
    let mut errors = Vec::new();
    let mut failed = 0;
    let mut first_failure = None;
    for (i, (traj, out)) in ds.trajectories.iter().zip(outputs).enumerate() {
        match out {
            Ok(est) => {
                let truth = Episode::from_trajectory(traj)?.seq.truth;
                errors.push(trajectory_error(&truth, est, &[2])?);
            }
            Err(e) => {
                failed += 1;
                first_failure.get_or_insert_with(|| format!("trajectory {i}: {e}"));
            }
        }
    }
    if errors.is_empty() {
        return Ok(CellScore { status: CellStatus::Diverged, report: None, failed, first_failure });
    }
    let report = summarize(&errors)?;
    let status = if failed > 0 {
        CellStatus::Partial
    } else if report.perfect {
        CellStatus::Perfect
    } else {
        CellStatus::Ok
    };
    Ok(CellScore { status, report: Some(report), failed, first_failure })
}
