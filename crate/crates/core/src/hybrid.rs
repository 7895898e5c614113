//! The learned-gain recursion shared by KalmanNet and Split-KalmanNet.
//!
//! Both filters keep the model-based prediction `x̂_{t|t−1} = f(x̂_{t−1|t−1}, u_t)`
//! and replace the analytic gain by a learned one:
//! `x̂_{t|t} = x̂_{t|t−1} + G_t · wrap(y_t − h(x̂_{t|t−1}))`. No covariance is
//! propagated. The gain networks read the features
//!
//! | name | definition                                   | at t = 1 |
//! |------|----------------------------------------------|----------|
//! | F1   | `x̂_{t−1|t−1} − x̂_{t−1|t−2}`                  | zero     |
//! | F2   | `x̂_{t−1|t−1} − x̂_{t−2|t−2}`                  | zero     |
//! | F3   | `y_t − h(x̂_{t|t−1})`                         |          |
//! | F4   | `y_t − y_{t−1}`                              | zero     |
//! | F5   | `h(x̂_{t|t−1}) − H_t x̂_{t|t−1}`               |          |
//! | F6   | `H_t`, flattened row-major                   |          |
//!
//! with every angular component wrapped to `[−π, π)`.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::ekf::initial_belief;
use crate::error::{Error, Result};
use crate::neural::{Node, Tape, Tensor2};
use crate::system::{Sequence, StateSpaceModel};

/// A filtering problem: inputs, ground truth and the initial estimate `x̂_{0|0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seq: Sequence,
    pub init: DVector<f64>,
}

impl Episode {
    /// Uses the shared EKF initialization (true pose, landmarks from `y₀`).
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        Ok(Episode { seq: traj.to_sequence(), init: initial_belief(traj)?.mean })
    }

    pub fn validate(&self, model: &dyn StateSpaceModel) -> Result<()> {
        self.seq.validate(model)?;
        if self.init.len() != model.state_dim() {
            return Err(Error::invalid("initial estimate dimension does not match the model"));
        }
        if self.seq.is_empty() {
            return Err(Error::invalid("episode has no steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
}

impl Feature {
    pub const ALL: [Feature; 6] = [Feature::F1, Feature::F2, Feature::F3, Feature::F4, Feature::F5, Feature::F6];

    /// Length for state dimension `n` and measurement dimension `p`.
    pub fn dim(self, n: usize, p: usize) -> usize {
        match self {
            Feature::F1 | Feature::F2 => n,
            Feature::F3 | Feature::F4 | Feature::F5 => p,
            Feature::F6 => n * p,
        }
    }
}

pub fn features_dim(set: &[Feature], n: usize, p: usize) -> usize {
    set.iter().map(|f| f.dim(n, p)).sum()
}

/// Feature values of one step, unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub f1: DVector<f64>,
    pub f2: DVector<f64>,
    pub f3: DVector<f64>,
    pub f4: DVector<f64>,
    pub f5: DVector<f64>,
    pub f6: DVector<f64>,
}

impl RawFeatures {
    pub fn get(&self, f: Feature) -> &DVector<f64> {
        match f {
            Feature::F1 => &self.f1,
            Feature::F2 => &self.f2,
            Feature::F3 => &self.f3,
            Feature::F4 => &self.f4,
            Feature::F5 => &self.f5,
            Feature::F6 => &self.f6,
        }
    }

    pub fn assemble(&self, set: &[Feature]) -> Vec<f64> {
        set.iter().flat_map(|f| self.get(*f).iter().copied()).collect()
    }
}

fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.transpose().as_slice())
}

/// Tracks the history needed for the features, outside any tape.
#[derive(Clone)]
pub struct FeatureExtractor<'m> {
    model: &'m dyn StateSpaceModel,
    post: DVector<f64>,
    prev_prior: Option<DVector<f64>>,
    prev_post: Option<DVector<f64>>,
    prev_y: Option<DVector<f64>>,
}

impl<'m> FeatureExtractor<'m> {
    pub fn new(model: &'m dyn StateSpaceModel, init: DVector<f64>) -> Self {
        FeatureExtractor { model, post: init, prev_prior: None, prev_post: None, prev_y: None }
    }

    /// Latest posterior `x̂_{t−1|t−1}`.
    pub fn posterior(&self) -> &DVector<f64> {
        &self.post
    }

    pub fn prior(&self, control: &[f64]) -> Result<DVector<f64>> {
        self.model.transition(&self.post, control)
    }

    /// Features for the step whose prior is `prior` and measurement `y`.
    pub fn features(&self, prior: &DVector<f64>, y: &DVector<f64>) -> Result<RawFeatures> {
        let m = self.model;
        let n = m.state_dim();
        let p = m.meas_dim();
        let f1 = match &self.prev_prior {
            Some(pp) => m.state_difference(&self.post, pp),
            None => DVector::zeros(n),
        };
        let f2 = match &self.prev_post {
            Some(pp) => m.state_difference(&self.post, pp),
            None => DVector::zeros(n),
        };
        let y_hat = m.observe(prior)?;
        let f3 = m.measurement_difference(y, &y_hat);
        let f4 = match &self.prev_y {
            Some(py) => m.measurement_difference(y, py),
            None => DVector::zeros(p),
        };
        let h = m.observation_jacobian(prior)?;
        let mut f5 = &y_hat - &h * prior;
        m.wrap_measurement(&mut f5);
        Ok(RawFeatures { f1, f2, f3, f4, f5, f6: flatten_row_major(&h) })
    }

    /// Records the completed step.
    pub fn advance(&mut self, prior: DVector<f64>, post: DVector<f64>, y: DVector<f64>) {
        let old = std::mem::replace(&mut self.post, post);
        self.prev_post = Some(old);
        self.prev_prior = Some(prior);
        self.prev_y = Some(y);
    }
}

/// Replays the feature definitions along a given posterior sequence.
pub fn replay_features(model: &dyn StateSpaceModel, episode: &Episode, posts: &[DVector<f64>]) -> Result<Vec<RawFeatures>> {
    let mut ex = FeatureExtractor::new(model, episode.init.clone());
    let mut out = Vec::with_capacity(posts.len());
    for (t, post) in posts.iter().enumerate() {
        let prior = ex.prior(&episode.seq.controls[t])?;
        let y = &episode.seq.measurements[t];
        out.push(ex.features(&prior, y).map_err(|e| e.at_step(t))?);
        ex.advance(prior, post.clone(), y.clone());
    }
    Ok(out)
}

/// Frozen per-element standardization `(x − mean) · inv_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Elements whose spread is below this are only centered.
pub const MIN_FEATURE_STD: f64 = 1e-6;

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm { mean: vec![0.0; dim], inv_std: vec![1.0; dim] }
    }

    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("no samples to fit feature statistics"))?;
        let dim = first.len();
        let count = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            if s.len() != dim {
                return Err(Error::invalid("feature samples have different lengths"));
            }
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd >= MIN_FEATURE_STD { 1.0 / sd } else { 1.0 }
            })
            .collect();
        if mean.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature statistics"));
        }
        Ok(FeatureNorm { mean, inv_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), k)| (v - m) * k).collect()
    }

    pub(crate) fn apply_on_tape(&self, tape: &mut Tape<'_>, x: Node) -> Result<Node> {
        tape.affine(x, &self.mean, Rc::from(self.inv_std.clone()))
    }
}

/// Nodes available to a gain network at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub prior: Node,
    pub f1: Node,
    pub f2: Node,
    pub f3: Node,
    pub f4: Node,
    pub f5: Node,
    pub f6: Node,
    /// `H_t` at the prior.
    pub jacobian: Node,
}

impl StepNodes {
    pub fn get(&self, f: Feature) -> Node {
        match f {
            Feature::F1 => self.f1,
            Feature::F2 => self.f2,
            Feature::F3 => self.f3,
            Feature::F4 => self.f4,
            Feature::F5 => self.f5,
            Feature::F6 => self.f6,
        }
    }

    pub fn assemble(&self, tape: &mut Tape<'_>, set: &[Feature]) -> Result<Node> {
        let parts: Vec<Node> = set.iter().map(|f| self.get(*f)).collect();
        tape.concat(&parts)
    }
}

/// Runs the learned-gain recursion on `tape`. `gain(tape, t, nodes)` returns the
/// `n × p` gain node for step `t`. Returns the posterior nodes.
pub fn run_on_tape<'m>(
    tape: &mut Tape<'m>,
    model: &'m dyn StateSpaceModel,
    episode: &Episode,
    gain: &mut dyn FnMut(&mut Tape<'m>, usize, &StepNodes) -> Result<Node>,
) -> Result<Vec<Node>> {
    episode.validate(model)?;
    let n = model.state_dim();
    let p = model.meas_dim();
    let s_angles: Vec<usize> = model.state_angle_indices().to_vec();
    let m_angles: Vec<usize> = model.meas_angle_indices().to_vec();
    let zeros_n = tape.constant(Tensor2::zeros(n, 1));
    let zeros_p = tape.constant(Tensor2::zeros(p, 1));

    let mut post = tape.constant(Tensor2::from_dvector(&episode.init));
    let mut prev_post: Option<Node> = None;
    let mut prev_prior: Option<Node> = None;
    let mut prev_y: Option<Node> = None;
    let mut posts = Vec::with_capacity(episode.seq.len());

    for t in 0..episode.seq.len() {
        let step = |e: Error| e.at_step(t);
        let prior = tape.transition(post, &episode.seq.controls[t]).map_err(step)?;
        let y_hat = tape.observe(prior).map_err(step)?;
        let y = tape.constant(Tensor2::from_dvector(&episode.seq.measurements[t]));
        let raw_innov = tape.sub(y, y_hat)?;
        let f3 = tape.wrap(raw_innov, &m_angles);

        let diff_state = |tape: &mut Tape<'m>, a: Node, b: Option<Node>| -> Result<Node> {
            Ok(match b {
                Some(b) => {
                    let d = tape.sub(a, b)?;
                    tape.wrap(d, &s_angles)
                }
                None => zeros_n,
            })
        };
        let f1 = diff_state(tape, post, prev_prior)?;
        let f2 = diff_state(tape, post, prev_post)?;
        let f4 = match prev_y {
            Some(py) => {
                let d = tape.sub(y, py)?;
                tape.wrap(d, &m_angles)
            }
            None => zeros_p,
        };
        let jacobian = tape.observation_jacobian(prior).map_err(step)?;
        let hx = tape.matmul(jacobian, prior)?;
        let lin = tape.sub(y_hat, hx)?;
        let f5 = tape.wrap(lin, &m_angles);
        let f6 = tape.reshape(jacobian, n * p, 1)?;
        let nodes = StepNodes { prior, f1, f2, f3, f4, f5, f6, jacobian };

        let k = gain(tape, t, &nodes).map_err(step)?;
        if tape.value(k).shape() != (n, p) {
            return Err(Error::invalid(format!("gain has shape {:?}, expected ({n}, {p})", tape.value(k).shape())));
        }
        let correction = tape.matmul(k, f3)?;
        let sum = tape.add(prior, correction)?;
        let new_post = tape.wrap(sum, &s_angles);
        if !tape.value(new_post).all_finite() {
            return Err(Error::Divergence { step: t, reason: "non-finite posterior estimate".into() });
        }
        posts.push(new_post);
        prev_post = Some(post);
        prev_prior = Some(prior);
        prev_y = Some(y);
        post = new_post;
    }
    Ok(posts)
}

/// `(1/T) Σ_t ‖x_t − x̂_{t|t}‖²` with angular errors wrapped.
pub fn trajectory_loss(tape: &mut Tape<'_>, model: &dyn StateSpaceModel, posts: &[Node], truth: &[DVector<f64>]) -> Result<Node> {
    if posts.len() != truth.len() || posts.is_empty() {
        return Err(Error::invalid("loss needs one truth vector per posterior"));
    }
    let angles: Vec<usize> = model.state_angle_indices().to_vec();
    let mut total: Option<Node> = None;
    for (p, x) in posts.iter().zip(truth) {
        let xt = tape.constant(Tensor2::from_dvector(x));
        let d = tape.sub(*p, xt)?;
        let d = tape.wrap(d, &angles);
        let sq = tape.sum_squares(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / posts.len() as f64))
}

/// Posterior values of a finished tape run.
pub fn posterior_values(tape: &Tape<'_>, posts: &[Node]) -> Vec<DVector<f64>> {
    posts.iter().map(|p| tape.value(*p).to_dvector()).collect()
}

/// Squared-error loss of a plain estimate sequence, matching [`trajectory_loss`].
pub fn sequence_loss(model: &dyn StateSpaceModel, estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let total: f64 = estimates.iter().zip(truth).map(|(e, x)| model.state_difference(e, x).norm_squared()).sum();
    total / estimates.len().max(1) as f64
}
