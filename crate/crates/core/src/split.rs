//! Split-KalmanNet: the gain is `G¹ Hᵀ G²`, where `G¹` (`n × n`) stands in
//! for the prior state covariance and `G²` (`p × p`) for the inverse
//! innovation covariance, each produced by its own recurrent network, and
//! `H` is the analytic measurement Jacobian at the prior.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hybrid::{
    features_dim, posterior_values, run_on_tape, trajectory_loss, Episode, Feature, FeatureExtractor, FeatureNorm,
    RawFeatures,
};
use crate::kalmannet::correct;
use crate::neural::{
    load_checkpoint, save_checkpoint, BoundNet, GainNetConfig, Node, Parameter, RecurrentGainNet, Tape, Tensor2,
};
use crate::slam_model::RangeBearingModel;
use crate::system::StateSpaceModel;
use crate::train::{episodes, fit_feature_norms, Learner, Phase, TrainConfig, Trainer, TrainingLog};

pub const CHECKPOINT_TAG: &str = "A4";

/// Which features feed which factor network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRouting {
    /// State-side features (F1, F2) to `G¹`, innovation-side (F3, F4) to `G²`;
    /// both see F5 and F6.
    #[default]
    Split,
    /// Every feature to both networks.
    Shared,
}

impl FeatureRouting {
    pub fn g1(self) -> &'static [Feature] {
        match self {
            FeatureRouting::Split => &[Feature::F1, Feature::F2, Feature::F5, Feature::F6],
            FeatureRouting::Shared => &Feature::ALL,
        }
    }

    pub fn g2(self) -> &'static [Feature] {
        match self {
            FeatureRouting::Split => &[Feature::F3, Feature::F4, Feature::F5, Feature::F6],
            FeatureRouting::Shared => &Feature::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub g1_hidden: usize,
    pub g2_hidden: usize,
    pub routing: FeatureRouting,
    pub output_init_scale: f64,
    /// Update both networks together instead of alternating (ablation).
    pub joint: bool,
    pub train: TrainConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            g1_hidden: 64,
            g2_hidden: 64,
            routing: FeatureRouting::Split,
            output_init_scale: crate::kalmannet::OUTPUT_INIT_SCALE,
            joint: false,
            train: TrainConfig::default(),
        }
    }
}

/// `g1 · hᵀ · g2`.
pub fn compose_gain(g1: &Tensor2, h: &Tensor2, g2: &Tensor2) -> Result<Tensor2> {
    let (n, p) = (g1.rows(), g2.rows());
    if g1.shape() != (n, n) || g2.shape() != (p, p) || h.shape() != (p, n) {
        return Err(Error::invalid(format!(
            "cannot compose gain from {:?}, H {:?}, {:?}",
            g1.shape(),
            h.shape(),
            g2.shape()
        )));
    }
    g1.matmul(&h.transpose())?.matmul(g2)
}

/// [`compose_gain`] on a tape.
pub fn compose_gain_on_tape(tape: &mut Tape<'_>, g1: Node, h: Node, g2: Node) -> Result<Node> {
    let ht = tape.transpose(h);
    let left = tape.matmul(g1, ht)?;
    tape.matmul(left, g2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitGainModel {
    pub state_dim: usize,
    pub meas_dim: usize,
    pub routing: FeatureRouting,
    pub g1_net: RecurrentGainNet,
    pub g2_net: RecurrentGainNet,
    pub g1_norm: FeatureNorm,
    pub g2_norm: FeatureNorm,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    state_dim: usize,
    meas_dim: usize,
    routing: FeatureRouting,
    g1_norm: FeatureNorm,
    g2_norm: FeatureNorm,
}

/// Per-step factor outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FactorNodes {
    pub g1: Node,
    pub g2: Node,
    pub jacobian: Node,
    pub gain: Node,
    pub g1_input: Node,
    pub g2_input: Node,
}

/// A recorded Split-KalmanNet run.
pub struct SplitRecording<'m> {
    pub tape: Tape<'m>,
    pub posts: Vec<Node>,
    pub steps: Vec<FactorNodes>,
    pub g1: BoundNet,
    pub g2: BoundNet,
}

impl SplitGainModel {
    pub fn input_dims(routing: FeatureRouting, n: usize, p: usize) -> (usize, usize) {
        (features_dim(routing.g1(), n, p), features_dim(routing.g2(), n, p))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        meas_dim: usize,
        routing: FeatureRouting,
        g1: GainNetConfig,
        g2: GainNetConfig,
        g1_norm: FeatureNorm,
        g2_norm: FeatureNorm,
        seed: u64,
    ) -> Result<Self> {
        let (d1, d2) = Self::input_dims(routing, state_dim, meas_dim);
        if g1.input_dim != d1 || (g1.output_rows, g1.output_cols) != (state_dim, state_dim) {
            return Err(Error::invalid("G1 network does not fit the state dimension"));
        }
        if g2.input_dim != d2 || (g2.output_rows, g2.output_cols) != (meas_dim, meas_dim) {
            return Err(Error::invalid("G2 network does not fit the measurement dimension"));
        }
        if g1_norm.dim() != d1 || g2_norm.dim() != d2 {
            return Err(Error::invalid("normalization statistics have the wrong length"));
        }
        Ok(SplitGainModel {
            state_dim,
            meas_dim,
            routing,
            g1_net: RecurrentGainNet::new(g1, seed, 1)?,
            g2_net: RecurrentGainNet::new(g2, seed, 2)?,
            g1_norm,
            g2_norm,
        })
    }

    /// Normalized inputs of the two networks for one step.
    pub fn features_a4(&self, raw: &RawFeatures) -> (Vec<f64>, Vec<f64>) {
        (
            self.g1_norm.apply(&raw.assemble(self.routing.g1())),
            self.g2_norm.apply(&raw.assemble(self.routing.g2())),
        )
    }

    fn check_system(&self, system: &dyn StateSpaceModel) -> Result<()> {
        if system.state_dim() != self.state_dim || system.meas_dim() != self.meas_dim {
            return Err(Error::invalid("model dimensions do not match the system"));
        }
        Ok(())
    }

    /// Records a run; `train_g1`/`train_g2` choose which networks get adjoints.
    pub fn record<'m>(
        &self,
        system: &'m dyn StateSpaceModel,
        ep: &Episode,
        train_g1: bool,
        train_g2: bool,
    ) -> Result<SplitRecording<'m>> {
        self.check_system(system)?;
        let mut tape = Tape::with_model(system);
        let b1 = self.g1_net.bind(&mut tape, train_g1);
        let b2 = self.g2_net.bind(&mut tape, train_g2);
        let mut h1 = b1.initial_hidden(&mut tape);
        let mut h2 = b2.initial_hidden(&mut tape);
        let mut steps = Vec::with_capacity(ep.seq.len());
        let posts = run_on_tape(&mut tape, system, ep, &mut |tape, _, nodes| {
            let x1 = nodes.assemble(tape, self.routing.g1())?;
            let x1 = self.g1_norm.apply_on_tape(tape, x1)?;
            let x2 = nodes.assemble(tape, self.routing.g2())?;
            let x2 = self.g2_norm.apply_on_tape(tape, x2)?;
            let (g1, h1_new) = b1.step(tape, x1, h1)?;
            let (g2, h2_new) = b2.step(tape, x2, h2)?;
            h1 = h1_new;
            h2 = h2_new;
            let gain = compose_gain_on_tape(tape, g1, nodes.jacobian, g2)?;
            steps.push(FactorNodes { g1, g2, jacobian: nodes.jacobian, gain, g1_input: x1, g2_input: x2 });
            Ok(gain)
        })?;
        Ok(SplitRecording { tape, posts, steps, g1: b1, g2: b2 })
    }

    pub fn filter(&self, system: &dyn StateSpaceModel, ep: &Episode) -> Result<Vec<DVector<f64>>> {
        let rec = self.record(system, ep, false, false)?;
        Ok(posterior_values(&rec.tape, &rec.posts))
    }

    /// Episode loss with gradients for `G¹` and `G²` (each `None` when frozen).
    #[allow(clippy::type_complexity)]
    pub fn loss_and_gradients(
        &self,
        system: &dyn StateSpaceModel,
        ep: &Episode,
        train_g1: bool,
        train_g2: bool,
    ) -> Result<(f64, Option<Vec<Tensor2>>, Option<Vec<Tensor2>>)> {
        let mut rec = self.record(system, ep, train_g1, train_g2)?;
        let loss = trajectory_loss(&mut rec.tape, system, &rec.posts, &ep.seq.truth)?;
        let value = rec.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step: ep.seq.len(), reason: "non-finite loss".into() });
        }
        if !train_g1 && !train_g2 {
            return Ok((value, None, None));
        }
        let adj = rec.tape.backward(loss)?;
        let g1 = train_g1.then(|| rec.g1.gradients(&adj));
        let g2 = train_g2.then(|| rec.g2.gradients(&adj));
        Ok((value, g1, g2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            state_dim: self.state_dim,
            meas_dim: self.meas_dim,
            routing: self.routing,
            g1_norm: self.g1_norm.clone(),
            g2_norm: self.g2_norm.clone(),
        };
        save_checkpoint(path, CHECKPOINT_TAG, &[("g1", &self.g1_net), ("g2", &self.g2_net)], &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, CHECKPOINT_TAG)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format { record: 0, reason: format!("bad A4 metadata: {e}") })?;
        let (d1, d2) = Self::input_dims(meta.routing, meta.state_dim, meta.meas_dim);
        let g1_net = ck.net("g1")?.clone();
        let g2_net = ck.net("g2")?.clone();
        if g1_net.config().input_dim != d1 || g2_net.config().input_dim != d2 || meta.g1_norm.dim() != d1 || meta.g2_norm.dim() != d2 {
            return Err(Error::Format { record: 0, reason: "A4 checkpoint dimensions are inconsistent".into() });
        }
        Ok(SplitGainModel {
            state_dim: meta.state_dim,
            meas_dim: meta.meas_dim,
            routing: meta.routing,
            g1_net,
            g2_net,
            g1_norm: meta.g1_norm,
            g2_norm: meta.g2_norm,
        })
    }
}

/// Step-by-step Split-KalmanNet filtering.
pub struct SplitKalmanNetFilter<'a> {
    model: &'a SplitGainModel,
    system: &'a dyn StateSpaceModel,
    g1: RecurrentGainNet,
    g2: RecurrentGainNet,
    features: FeatureExtractor<'a>,
}

impl<'a> SplitKalmanNetFilter<'a> {
    pub fn new(model: &'a SplitGainModel, system: &'a dyn StateSpaceModel, init: DVector<f64>) -> Result<Self> {
        model.check_system(system)?;
        let mut g1 = model.g1_net.clone();
        let mut g2 = model.g2_net.clone();
        g1.reset();
        g2.reset();
        Ok(SplitKalmanNetFilter { model, system, g1, g2, features: FeatureExtractor::new(system, init) })
    }

    pub fn estimate(&self) -> &DVector<f64> {
        self.features.posterior()
    }

    pub fn step(&mut self, control: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
        let prior = self.features.prior(control)?;
        let raw = self.features.features(&prior, y)?;
        let (x1, x2) = self.model.features_a4(&raw);
        let g1 = self.g1.forward_step(&x1)?;
        let g2 = self.g2.forward_step(&x2)?;
        let h = Tensor2::from_dmatrix(&self.system.observation_jacobian(&prior)?);
        let k = compose_gain(&g1, &h, &g2)?;
        let post = correct(self.system, &prior, &k, &raw.f3)?;
        self.features.advance(prior, post.clone(), y.clone());
        Ok(post)
    }
}

/// Runs the recursion with externally supplied factors `(G¹_t, G²_t)`.
pub fn filter_with_factors(
    system: &dyn StateSpaceModel,
    ep: &Episode,
    factors: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<Vec<DVector<f64>>> {
    if factors.len() != ep.seq.len() {
        return Err(Error::invalid("one factor pair per step is required"));
    }
    let mut tape = Tape::with_model(system);
    let posts = run_on_tape(&mut tape, system, ep, &mut |tape, t, nodes| {
        let g1 = tape.constant(Tensor2::from_dmatrix(&factors[t].0));
        let g2 = tape.constant(Tensor2::from_dmatrix(&factors[t].1));
        compose_gain_on_tape(tape, g1, nodes.jacobian, g2)
    })?;
    Ok(posterior_values(&tape, &posts))
}

struct A4Learner<'s> {
    system: &'s dyn StateSpaceModel,
    model: SplitGainModel,
}

impl Learner for A4Learner<'_> {
    fn group_count(&self) -> usize {
        2
    }

    fn params(&self, group: usize) -> &[Parameter] {
        if group == 0 { self.model.g1_net.params() } else { self.model.g2_net.params() }
    }

    fn params_mut(&mut self, group: usize) -> &mut [Parameter] {
        if group == 0 { self.model.g1_net.params_mut() } else { self.model.g2_net.params_mut() }
    }

    fn loss_and_grads(&self, ep: &Episode, groups: &[usize]) -> Result<(f64, Vec<Vec<Tensor2>>)> {
        let (t1, t2) = (groups.contains(&0), groups.contains(&1));
        let (l, g1, g2) = self.model.loss_and_gradients(self.system, ep, t1, t2)?;
        let mut out = Vec::new();
        for &g in groups {
            out.push(if g == 0 { g1.clone() } else { g2.clone() }.expect("requested group has gradients"));
        }
        Ok((l, out))
    }

    fn loss(&self, ep: &Episode) -> Result<f64> {
        let est = self.model.filter(self.system, ep)?;
        Ok(crate::hybrid::sequence_loss(self.system, &est, &ep.seq.truth))
    }
}

/// Alternating (or joint, per `joint`) training on generic episodes.
pub fn train_a4_episodes(
    system: &dyn StateSpaceModel,
    model: SplitGainModel,
    episodes: Vec<Episode>,
    cfg: &TrainConfig,
    joint: bool,
) -> Result<(SplitGainModel, TrainingLog)> {
    model.check_system(system)?;
    for ep in &episodes {
        ep.validate(system)?;
    }
    let mut trainer = Trainer::new(A4Learner { system, model }, cfg, episodes)?;
    let mut previous = trainer.log.initial_val_loss;
    for cycle in 0..cfg.max_cycles {
        let val = if joint {
            trainer.epoch(&[0, 1], Phase::Joint, Some(cycle))?
        } else {
            trainer.epoch(&[0], Phase::G1, Some(cycle))?;
            trainer.epoch(&[1], Phase::G2, Some(cycle))?
        };
        trainer.log.cycle_val_losses.push(val);
        let change = (previous - val).abs() / previous.abs().max(f64::MIN_POSITIVE);
        previous = val;
        if change < cfg.convergence_tol {
            trainer.log.converged = true;
            break;
        }
    }
    let (learner, log) = trainer.finish();
    Ok((learner.model, log))
}

pub fn train_a4(ds: &Dataset, cfg: &SplitConfig) -> Result<(SplitGainModel, TrainingLog)> {
    let system = RangeBearingModel::new(ds.landmark_count())?;
    let (n, p) = (system.state_dim(), system.meas_dim());
    let mut norms = fit_feature_norms(ds, &[cfg.routing.g1(), cfg.routing.g2()], cfg.train.norm_samples, cfg.train.execution)?;
    let g2_norm = norms.pop().expect("two norms");
    let g1_norm = norms.pop().expect("two norms");
    let (d1, d2) = SplitGainModel::input_dims(cfg.routing, n, p);
    let mut c1 = GainNetConfig::new(d1, cfg.g1_hidden, n, n);
    let mut c2 = GainNetConfig::new(d2, cfg.g2_hidden, p, p);
    c1.output_init_scale = cfg.output_init_scale;
    c2.output_init_scale = cfg.output_init_scale;
    let model = SplitGainModel::new(n, p, cfg.routing, c1, c2, g1_norm, g2_norm, cfg.train.seed)?;
    train_a4_episodes(&system, model, episodes(ds)?, &cfg.train, cfg.joint)
}

pub fn evaluate_a4(model: &SplitGainModel, ds: &Dataset, exec: crate::par::Execution) -> Vec<Result<Vec<DVector<f64>>>> {
    let system = match RangeBearingModel::new(ds.landmark_count()) {
        Ok(s) => s,
        Err(e) => return vec![Err(e)],
    };
    exec.map(&ds.trajectories, |_, traj| {
        let ep = Episode::from_trajectory(traj)?;
        model.filter(&system, &ep)
    })
}
