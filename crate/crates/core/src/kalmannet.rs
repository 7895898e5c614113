//! KalmanNet: one recurrent network emits the whole `n × p` gain from the
//! features F1–F4.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hybrid::{
    features_dim, posterior_values, run_on_tape, trajectory_loss, Episode, Feature, FeatureExtractor, FeatureNorm,
    RawFeatures,
};
use crate::neural::{load_checkpoint, save_checkpoint, GainNetConfig, Parameter, RecurrentGainNet, Tape, Tensor2};
use crate::slam_model::RangeBearingModel;
use crate::system::StateSpaceModel;
use crate::train::{episodes, fit_feature_norms, Learner, Phase, TrainConfig, Trainer, TrainingLog};

pub const A3_FEATURES: [Feature; 4] = [Feature::F1, Feature::F2, Feature::F3, Feature::F4];
pub const CHECKPOINT_TAG: &str = "A3";

/// Default shrink of the output layer at initialization, so the first gains
/// are small and the untrained filter stays close to pure prediction.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanNetConfig {
    pub hidden_dim: usize,
    pub output_init_scale: f64,
    pub train: TrainConfig,
}

impl Default for KalmanNetConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        // 1e-3 diverges within the first epoch on the training scenario
        train.adam.learning_rate = 3e-4;
        KalmanNetConfig { hidden_dim: 128, output_init_scale: OUTPUT_INIT_SCALE, train }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanNetModel {
    pub state_dim: usize,
    pub meas_dim: usize,
    pub gain_net: RecurrentGainNet,
    pub norm: FeatureNorm,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    state_dim: usize,
    meas_dim: usize,
    norm: FeatureNorm,
}

impl KalmanNetModel {
    pub fn input_dim(state_dim: usize, meas_dim: usize) -> usize {
        features_dim(&A3_FEATURES, state_dim, meas_dim)
    }

    pub fn new(state_dim: usize, meas_dim: usize, net: GainNetConfig, norm: FeatureNorm, seed: u64) -> Result<Self> {
        let input = Self::input_dim(state_dim, meas_dim);
        if net.input_dim != input || net.output_rows != state_dim || net.output_cols != meas_dim {
            return Err(Error::invalid(format!(
                "gain network {}→{}x{} does not fit state {state_dim}, measurement {meas_dim}",
                net.input_dim, net.output_rows, net.output_cols
            )));
        }
        if norm.dim() != input {
            return Err(Error::invalid("normalization statistics have the wrong length"));
        }
        Ok(KalmanNetModel { state_dim, meas_dim, gain_net: RecurrentGainNet::new(net, seed, 0)?, norm })
    }

    /// Normalized network input for one step.
    pub fn features_a3(&self, raw: &RawFeatures) -> Vec<f64> {
        self.norm.apply(&raw.assemble(&A3_FEATURES))
    }

    fn check_system(&self, system: &dyn StateSpaceModel) -> Result<()> {
        if system.state_dim() != self.state_dim || system.meas_dim() != self.meas_dim {
            return Err(Error::invalid("model dimensions do not match the system"));
        }
        Ok(())
    }

    fn record<'m>(
        &self,
        tape: &mut Tape<'m>,
        system: &'m dyn StateSpaceModel,
        ep: &Episode,
        trainable: bool,
    ) -> Result<(Vec<crate::neural::Node>, crate::neural::BoundNet)> {
        self.check_system(system)?;
        let bound = self.gain_net.bind(tape, trainable);
        let mut h = bound.initial_hidden(tape);
        let posts = run_on_tape(tape, system, ep, &mut |tape, _, nodes| {
            let x = nodes.assemble(tape, &A3_FEATURES)?;
            let xn = self.norm.apply_on_tape(tape, x)?;
            let (k, h_new) = bound.step(tape, xn, h)?;
            h = h_new;
            Ok(k)
        })?;
        Ok((posts, bound))
    }

    /// Posterior means `x̂_{t|t}` over the episode.
    pub fn filter(&self, system: &dyn StateSpaceModel, ep: &Episode) -> Result<Vec<DVector<f64>>> {
        let mut tape = Tape::with_model(system);
        let (posts, _) = self.record(&mut tape, system, ep, false)?;
        Ok(posterior_values(&tape, &posts))
    }

    /// Episode loss and its gradient with respect to every network parameter.
    pub fn loss_and_gradient(&self, system: &dyn StateSpaceModel, ep: &Episode) -> Result<(f64, Vec<Tensor2>)> {
        let mut tape = Tape::with_model(system);
        let (posts, bound) = self.record(&mut tape, system, ep, true)?;
        let loss = trajectory_loss(&mut tape, system, &posts, &ep.seq.truth)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step: ep.seq.len(), reason: "non-finite loss".into() });
        }
        let adj = tape.backward(loss)?;
        Ok((value, bound.gradients(&adj)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta { state_dim: self.state_dim, meas_dim: self.meas_dim, norm: self.norm.clone() };
        save_checkpoint(path, CHECKPOINT_TAG, &[("gain", &self.gain_net)], &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, CHECKPOINT_TAG)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format { record: 0, reason: format!("bad A3 metadata: {e}") })?;
        let gain_net = ck.net("gain")?.clone();
        if gain_net.config().input_dim != Self::input_dim(meta.state_dim, meta.meas_dim) || meta.norm.dim() != gain_net.config().input_dim {
            return Err(Error::Format { record: 0, reason: "A3 checkpoint dimensions are inconsistent".into() });
        }
        Ok(KalmanNetModel { state_dim: meta.state_dim, meas_dim: meta.meas_dim, gain_net, norm: meta.norm })
    }
}

/// Step-by-step KalmanNet filtering, one measurement at a time.
pub struct KalmanNetFilter<'a> {
    model: &'a KalmanNetModel,
    system: &'a dyn StateSpaceModel,
    net: RecurrentGainNet,
    features: FeatureExtractor<'a>,
}

impl<'a> KalmanNetFilter<'a> {
    /// Starts from `x̂_{0|0} = init` with a cleared hidden state.
    pub fn new(model: &'a KalmanNetModel, system: &'a dyn StateSpaceModel, init: DVector<f64>) -> Result<Self> {
        model.check_system(system)?;
        let mut net = model.gain_net.clone();
        net.reset();
        Ok(KalmanNetFilter { model, system, net, features: FeatureExtractor::new(system, init) })
    }

    pub fn estimate(&self) -> &DVector<f64> {
        self.features.posterior()
    }

    /// Predicts with `control`, then corrects with `y` using the learned gain.
    pub fn step(&mut self, control: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
        let prior = self.features.prior(control)?;
        let raw = self.features.features(&prior, y)?;
        let k = self.net.forward_step(&self.model.features_a3(&raw))?;
        let post = correct(self.system, &prior, &k, &raw.f3)?;
        self.features.advance(prior, post.clone(), y.clone());
        Ok(post)
    }
}

/// `wrap(prior + K·Δy)`, with the product in the same kernel as the tape path.
pub(crate) fn correct(system: &dyn StateSpaceModel, prior: &DVector<f64>, k: &Tensor2, innovation: &DVector<f64>) -> Result<DVector<f64>> {
    let dk = k.matmul(&Tensor2::from_dvector(innovation))?;
    let mut post = prior + dk.to_dvector();
    system.wrap_state(&mut post);
    if post.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, reason: "non-finite posterior estimate".into() });
    }
    Ok(post)
}

/// Runs the learned-gain recursion with externally supplied gains, one per step.
pub fn filter_with_gains(system: &dyn StateSpaceModel, ep: &Episode, gains: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
    if gains.len() != ep.seq.len() {
        return Err(Error::invalid("one gain per step is required"));
    }
    let mut tape = Tape::with_model(system);
    let posts = run_on_tape(&mut tape, system, ep, &mut |tape, t, _| Ok(tape.constant(Tensor2::from_dmatrix(&gains[t]))))?;
    Ok(posterior_values(&tape, &posts))
}

struct A3Learner<'s> {
    system: &'s dyn StateSpaceModel,
    model: KalmanNetModel,
}

impl Learner for A3Learner<'_> {
    fn group_count(&self) -> usize {
        1
    }

    fn params(&self, _group: usize) -> &[Parameter] {
        self.model.gain_net.params()
    }

    fn params_mut(&mut self, _group: usize) -> &mut [Parameter] {
        self.model.gain_net.params_mut()
    }

    fn loss_and_grads(&self, ep: &Episode, _groups: &[usize]) -> Result<(f64, Vec<Vec<Tensor2>>)> {
        let (l, g) = self.model.loss_and_gradient(self.system, ep)?;
        Ok((l, vec![g]))
    }

    fn loss(&self, ep: &Episode) -> Result<f64> {
        let est = self.model.filter(self.system, ep)?;
        Ok(crate::hybrid::sequence_loss(self.system, &est, &ep.seq.truth))
    }
}

/// Trains `model` in place on generic episodes.
pub fn train_a3_episodes(
    system: &dyn StateSpaceModel,
    model: KalmanNetModel,
    episodes: Vec<Episode>,
    cfg: &TrainConfig,
) -> Result<(KalmanNetModel, TrainingLog)> {
    model.check_system(system)?;
    for ep in &episodes {
        ep.validate(system)?;
    }
    let mut trainer = Trainer::new(A3Learner { system, model }, cfg, episodes)?;
    for _ in 0..cfg.epochs {
        trainer.epoch(&[0], Phase::Joint, None)?;
    }
    let (learner, log) = trainer.finish();
    Ok((learner.model, log))
}

/// Fits feature statistics on `ds`, initializes a network and trains it.
pub fn train_a3(ds: &Dataset, cfg: &KalmanNetConfig) -> Result<(KalmanNetModel, TrainingLog)> {
    let m = ds.landmark_count();
    let system = RangeBearingModel::new(m)?;
    let (n, p) = (system.state_dim(), system.meas_dim());
    let norm = fit_feature_norms(ds, &[&A3_FEATURES], cfg.train.norm_samples, cfg.train.execution)?.remove(0);
    let mut net = GainNetConfig::new(KalmanNetModel::input_dim(n, p), cfg.hidden_dim, n, p);
    net.output_init_scale = cfg.output_init_scale;
    let model = KalmanNetModel::new(n, p, net, norm, cfg.train.seed)?;
    train_a3_episodes(&system, model, episodes(ds)?, &cfg.train)
}

/// Posterior means of a trained model on every trajectory of `ds`.
pub fn evaluate_a3(model: &KalmanNetModel, ds: &Dataset, exec: crate::par::Execution) -> Vec<Result<Vec<DVector<f64>>>> {
    let system = match RangeBearingModel::new(ds.landmark_count()) {
        Ok(s) => s,
        Err(e) => return vec![Err(e)],
    };
    exec.map(&ds.trajectories, |_, traj| {
        let ep = Episode::from_trajectory(traj)?;
        model.filter(&system, &ep)
    })
}
