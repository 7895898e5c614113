//! Mini-batch BPTT training shared by the learned-gain filters.

use serde::{Deserialize, Serialize};

use crate::dataset::rng::Sampler;
use crate::dataset::Dataset;
use crate::ekf::{run_trajectory, NoiseMatrices};
use crate::error::{Error, Result};
use crate::hybrid::{replay_features, Episode, Feature, FeatureNorm};
use crate::neural::{AdamConfig, OptimizerState, Parameter, Tensor2};
use crate::par::Execution;
use crate::slam_model::RangeBearingModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs of joint training (KalmanNet).
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Share of trajectories held out for validation and snapshot selection.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Trajectories used to fit the feature statistics.
    pub norm_samples: usize,
    /// Cap on alternating cycles (Split-KalmanNet).
    pub max_cycles: usize,
    /// Relative validation-loss change per cycle below which alternation stops.
    pub convergence_tol: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
            norm_samples: 256,
            max_cycles: 30,
            convergence_tol: 1e-3,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        if self.adam.learning_rate <= 0.0 || !self.adam.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// All parameters updated together.
    Joint,
    /// Only the first factor network is updated.
    G1,
    /// Only the second factor network is updated.
    G2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycle: Option<usize>,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean pre-clip gradient norm over the epoch's batches.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_val_loss: f64,
    pub records: Vec<EpochRecord>,
    pub best_val_loss: f64,
    /// Epoch whose parameters were kept; `None` means the initialization.
    pub best_epoch: Option<usize>,
    /// Per-cycle validation losses (alternating training only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cycle_val_losses: Vec<f64>,
    pub converged: bool,
}

/// A model trained by [`Trainer`]: parameters in groups that can be updated
/// independently.
pub(crate) trait Learner: Sync {
    fn group_count(&self) -> usize;
    fn params(&self, group: usize) -> &[Parameter];
    fn params_mut(&mut self, group: usize) -> &mut [Parameter];
    /// Loss of one episode and gradients for each requested group.
    fn loss_and_grads(&self, ep: &Episode, groups: &[usize]) -> Result<(f64, Vec<Vec<Tensor2>>)>;
    fn loss(&self, ep: &Episode) -> Result<f64>;
}

const SHUFFLE_SALT: u64 = 0x5EED_0F5A_FF1E;

pub(crate) struct Trainer<'c, L: Learner> {
    pub learner: L,
    cfg: &'c TrainConfig,
    train: Vec<Episode>,
    val: Vec<Episode>,
    opts: Vec<OptimizerState>,
    pub log: TrainingLog,
    best: Vec<Vec<Parameter>>,
    epoch: usize,
}

impl<'c, L: Learner> Trainer<'c, L> {
    pub fn new(learner: L, cfg: &'c TrainConfig, episodes: Vec<Episode>) -> Result<Self> {
        cfg.validate()?;
        if episodes.is_empty() {
            return Err(Error::invalid("no training trajectories"));
        }
        let (train, val) = split_validation(episodes, cfg.validation_fraction);
        let opts = (0..learner.group_count()).map(|g| OptimizerState::new(cfg.adam, learner.params(g))).collect();
        let best = (0..learner.group_count()).map(|g| learner.params(g).to_vec()).collect();
        let mut t = Trainer {
            learner,
            cfg,
            train,
            val,
            opts,
            log: TrainingLog {
                initial_val_loss: f64::NAN,
                records: Vec::new(),
                best_val_loss: f64::INFINITY,
                best_epoch: None,
                cycle_val_losses: Vec::new(),
                converged: false,
            },
            best,
            epoch: 0,
        };
        let v = t.validation_loss().map_err(|e| Error::Training(format!("initial validation: {e}")))?;
        t.log.initial_val_loss = v;
        t.log.best_val_loss = v;
        Ok(t)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        let losses = self.cfg.execution.map(&self.val, |_, ep| self.learner.loss(ep));
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        let v = total / self.val.len() as f64;
        if !v.is_finite() {
            return Err(Error::Training("non-finite validation loss".into()));
        }
        Ok(v)
    }

    fn shuffled(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut s = Sampler::new(self.cfg.seed ^ SHUFFLE_SALT, self.epoch as u64);
        for i in (1..order.len()).rev() {
            let j = s.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        order
    }

    /// One pass over the training set updating `groups`. Returns the
    /// validation loss afterwards.
    pub fn epoch(&mut self, groups: &[usize], phase: Phase, cycle: Option<usize>) -> Result<f64> {
        let epoch = self.epoch;
        let label = |b: Option<usize>| match (cycle, b) {
            (Some(c), Some(b)) => format!("cycle {c} phase {phase:?} epoch {epoch} batch {b}"),
            (Some(c), None) => format!("cycle {c} phase {phase:?} epoch {epoch}"),
            (None, Some(b)) => format!("epoch {epoch} batch {b}"),
            (None, None) => format!("epoch {epoch}"),
        };
        let order = self.shuffled();
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let learner = &self.learner;
            let train = &self.train;
            let results = self.cfg.execution.map(chunk, |_, &i| learner.loss_and_grads(&train[i], groups));
            let mut batch_loss = 0.0;
            let mut acc: Option<Vec<Vec<Tensor2>>> = None;
            for r in results {
                let (l, g) = r.map_err(|e| Error::Training(format!("{}: {e}", label(Some(b)))))?;
                batch_loss += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (ga, gb) in a.iter_mut().zip(&g) {
                            for (x, y) in ga.iter_mut().zip(gb) {
                                x.add_assign(y);
                            }
                        }
                    }
                }
            }
            let k = 1.0 / chunk.len() as f64;
            batch_loss *= k;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!("{}: non-finite loss", label(Some(b)))));
            }
            let acc = acc.expect("non-empty batch");
            for (&g, grads) in groups.iter().zip(acc) {
                let grads: Vec<Tensor2> = grads.into_iter().map(|t| t.scale(k)).collect();
                let norm = self.opts[g]
                    .step(self.learner.params_mut(g), grads)
                    .map_err(|e| Error::Training(format!("{}: {e}", label(Some(b)))))?;
                norm_sum += norm;
            }
            loss_sum += batch_loss;
            batches += 1;
        }
        for g in 0..self.learner.group_count() {
            if let Some(p) = self.learner.params(g).iter().find(|p| !p.value.all_finite()) {
                return Err(Error::Training(format!("{}: parameter {} became non-finite", label(None), p.name)));
            }
        }
        let val = self.validation_loss().map_err(|e| Error::Training(format!("{}: {e}", label(None))))?;
        self.log.records.push(EpochRecord {
            epoch: self.epoch,
            cycle,
            phase,
            train_loss: loss_sum / batches as f64,
            val_loss: val,
            grad_norm: norm_sum / (batches * groups.len()).max(1) as f64,
        });
        if val < self.log.best_val_loss {
            self.log.best_val_loss = val;
            self.log.best_epoch = Some(self.epoch);
            self.best = (0..self.learner.group_count()).map(|g| self.learner.params(g).to_vec()).collect();
        }
        self.epoch += 1;
        Ok(val)
    }

    /// Restores the best-validation parameters.
    pub fn finish(mut self) -> (L, TrainingLog) {
        for (g, params) in self.best.into_iter().enumerate() {
            self.learner.params_mut(g).clone_from_slice(&params);
        }
        (self.learner, self.log)
    }
}

/// The last `⌈fraction·L⌉` episodes (at least one when `L ≥ 2`) become the
/// validation set. With a single episode it serves both roles.
fn split_validation(mut episodes: Vec<Episode>, fraction: f64) -> (Vec<Episode>, Vec<Episode>) {
    let l = episodes.len();
    if l < 2 || fraction == 0.0 {
        let val = episodes.clone();
        return (episodes, val);
    }
    let n_val = ((l as f64 * fraction).ceil() as usize).clamp(1, l - 1);
    let val = episodes.split_off(l - n_val);
    (episodes, val)
}

/// Training episodes of a range-bearing dataset.
pub fn episodes(ds: &Dataset) -> Result<Vec<Episode>> {
    ds.trajectories.iter().map(Episode::from_trajectory).collect()
}

/// Fits one [`FeatureNorm`] per feature set from exact-statistics EKF runs on
/// the first `limit` trajectories. Trajectories on which the EKF fails are
/// skipped.
pub fn fit_feature_norms(ds: &Dataset, sets: &[&[Feature]], limit: usize, exec: Execution) -> Result<Vec<FeatureNorm>> {
    let system = RangeBearingModel::new(ds.landmark_count())?;
    let take = limit.max(1).min(ds.trajectories.len());
    let per_traj = exec.map(&ds.trajectories[..take], |_, traj| -> Option<Vec<Vec<Vec<f64>>>> {
        let run = run_trajectory(traj, &NoiseMatrices::exact_for(traj)).ok()?;
        let ep = Episode::from_trajectory(traj).ok()?;
        let raw = replay_features(&system, &ep, &run.means).ok()?;
        Some(sets.iter().map(|set| raw.iter().map(|r| r.assemble(set)).collect()).collect())
    });
    let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); sets.len()];
    for per_set in per_traj.into_iter().flatten() {
        for (acc, s) in samples.iter_mut().zip(per_set) {
            acc.extend(s);
        }
    }
    if samples.first().is_none_or(|s| s.is_empty()) {
        return Err(Error::Training("the reference EKF failed on every trajectory used for feature statistics".into()));
    }
    samples.iter().map(|s| FeatureNorm::fit(s)).collect()
}
