//! Model-based extended Kalman filter.
//!
//! Prediction propagates the mean through `f` and the covariance through the
//! motion Jacobian; the measurement update uses the gain `K = Σ Hᵀ S⁻¹`
//! obtained from a Cholesky solve and the subtractive covariance update
//! `Σ ← Σ − K S Kᵀ`, followed by symmetrization and, if the minimum
//! eigenvalue drops below `−1e−9`, an eigenvalue clip that is counted.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{q_from_variances, r_from_variances, NoiseConfig, Trajectory};
use crate::error::{Error, Result};
use crate::slam_model::{inverse_observation, Pose, RangeBearingModel};
use crate::system::{Sequence, StateSpaceModel};

pub const DEFAULT_CONDITION_CAP: f64 = 1e12;
/// Minimum eigenvalue tolerated before the covariance is repaired.
pub const PSD_TOLERANCE: f64 = 1e-9;
/// Initial pose variance (the pose starts at its true value).
pub const INITIAL_POSE_VARIANCE: f64 = 1e-4;
/// Initial landmark variance per axis.
pub const INITIAL_LANDMARK_VARIANCE: f64 = 1e2;
/// Lower bound applied to the nonzero diagonal entries of `Q` and `R` built
/// from realized statistics, so noiseless data still gives a solvable `S`.
pub const VARIANCE_FLOOR: f64 = 1e-9;
/// Noisy initial ranges below this are raised to it before landmark placement.
pub const INITIAL_RANGE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::invalid("covariance shape does not match the mean"));
        }
        Ok(GaussianBelief { mean, cov })
    }
}

/// Known dynamics plus the assumed noise statistics.
#[derive(Clone, Copy)]
pub struct FilterModel<'m> {
    pub system: &'m dyn StateSpaceModel,
    pub q: &'m DMatrix<f64>,
    pub r: &'m DMatrix<f64>,
    pub condition_cap: f64,
}

impl<'m> FilterModel<'m> {
    pub fn new(system: &'m dyn StateSpaceModel, q: &'m DMatrix<f64>, r: &'m DMatrix<f64>) -> Result<Self> {
        let (n, p) = (system.state_dim(), system.meas_dim());
        if q.shape() != (n, n) || r.shape() != (p, p) {
            return Err(Error::invalid(format!(
                "Q {:?} / R {:?} inconsistent with state {n} and measurement {p}",
                q.shape(),
                r.shape()
            )));
        }
        Ok(FilterModel { system, q, r, condition_cap: DEFAULT_CONDITION_CAP })
    }
}

/// Owned `Q`/`R` pair for the range-bearing model.
#[derive(Debug, Clone)]
pub struct NoiseMatrices {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl NoiseMatrices {
    pub fn from_config(cfg: &NoiseConfig, landmarks: usize) -> Self {
        Self::from_variances(cfg.process_variances(), cfg.measurement_variances(), landmarks)
    }

    /// The statistics that generated `traj`, floored at [`VARIANCE_FLOOR`].
    pub fn exact_for(traj: &Trajectory) -> Self {
        let n = &traj.noise;
        Self::from_variances(n.process_variances(), n.measurement_variances(), traj.landmark_count())
    }

    fn from_variances(w: [f64; 3], v: [f64; 2], landmarks: usize) -> Self {
        NoiseMatrices {
            q: q_from_variances(w.map(|x| x.max(VARIANCE_FLOOR)), landmarks),
            r: r_from_variances(v.map(|x| x.max(VARIANCE_FLOOR)), landmarks),
        }
    }
}

/// Pose at its true initial value with variance 1e−4; each landmark placed by
/// the inverse observation model from the initial measurement with variance 10².
pub fn initial_belief(traj: &Trajectory) -> Result<GaussianBelief> {
    let m = traj.landmark_count();
    let n = 3 + 2 * m;
    let s = &traj.initial_state;
    let pose = Pose::new(s[0], s[1], s[2]);
    let mut mean = DVector::zeros(n);
    mean[0] = pose.x;
    mean[1] = pose.y;
    mean[2] = pose.theta;
    for k in 0..m {
        let (lx, ly) = inverse_observation(
            &pose,
            traj.init_measurement[2 * k].max(INITIAL_RANGE_FLOOR),
            traj.init_measurement[2 * k + 1],
        )?;
        mean[3 + 2 * k] = lx;
        mean[4 + 2 * k] = ly;
    }
    let mut diag = DVector::from_element(n, INITIAL_LANDMARK_VARIANCE);
    diag.rows_mut(0, 3).fill(INITIAL_POSE_VARIANCE);
    GaussianBelief::new(mean, DMatrix::from_diagonal(&diag))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_finite(step: usize, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step, reason: format!("non-finite {what}") })
    }
}

/// Time update. `step` labels divergence errors.
pub fn predict(belief: &GaussianBelief, control: &[f64], model: &FilterModel<'_>, step: usize) -> Result<GaussianBelief> {
    let f = model.system.transition_jacobian(&belief.mean, control)?;
    let mean = model.system.transition(&belief.mean, control)?;
    let mut cov = &f * &belief.cov * f.transpose() + model.q;
    symmetrize(&mut cov);
    check_finite(step, "predicted mean", mean.as_slice())?;
    check_finite(step, "predicted covariance", cov.as_slice())?;
    Ok(GaussianBelief { mean, cov })
}

/// `K = Σ Hᵀ S⁻¹` with `S = H Σ Hᵀ + R`, via a Cholesky solve of `S Kᵀ = H Σ`.
pub fn kalman_gain(
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    condition_cap: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if h.ncols() != cov.nrows() || r.shape() != (h.nrows(), h.nrows()) {
        return Err(Error::invalid("gain operands have inconsistent shapes"));
    }
    let h_cov = h * cov;
    let mut s = &h_cov * h.transpose() + r;
    symmetrize(&mut s);
    let eig = s.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= condition_cap) {
        return Err(Error::IllConditioned { condition, cap: condition_cap });
    }
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::IllConditioned { condition, cap: condition_cap })?;
    let k = chol.solve(&h_cov).transpose();
    Ok((k, s))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub innovation_norm: f64,
    pub psd_repaired: bool,
}

/// Everything the measurement update computed, for factor-injection checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFactors {
    pub prior_cov: DMatrix<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

fn update_inner(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &FilterModel<'_>,
    step: usize,
) -> Result<(GaussianBelief, UpdateDiagnostics, StepFactors)> {
    let sys = model.system;
    let y_hat = sys.observe(&belief.mean)?;
    let h = sys.observation_jacobian(&belief.mean)?;
    let innovation = sys.measurement_difference(y, &y_hat);
    let (k, s) = kalman_gain(&belief.cov, &h, model.r, model.condition_cap)?;

    let mut mean = &belief.mean + &k * &innovation;
    sys.wrap_state(&mut mean);
    let mut cov = &belief.cov - &k * &s * k.transpose();
    symmetrize(&mut cov);
    check_finite(step, "posterior mean", mean.as_slice())?;
    check_finite(step, "posterior covariance", cov.as_slice())?;

    let mut psd_repaired = false;
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.min() < -PSD_TOLERANCE {
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(&mut cov);
        psd_repaired = true;
    }
    let diag = UpdateDiagnostics { innovation_norm: innovation.norm(), psd_repaired };
    let factors = StepFactors { prior_cov: belief.cov.clone(), innovation_cov: s, gain: k };
    Ok((GaussianBelief { mean, cov }, diag, factors))
}

/// Measurement update with a wrapped innovation.
pub fn update(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &FilterModel<'_>,
    step: usize,
) -> Result<(GaussianBelief, UpdateDiagnostics)> {
    update_inner(belief, y, model, step)
        .map(|(b, d, _)| (b, d))
        .map_err(|e| e.at_step(step))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterRun {
    /// Posterior means `x̂_{t|t}`, one per step.
    pub means: Vec<DVector<f64>>,
    pub innovation_norms: Vec<f64>,
    pub cov_traces: Vec<f64>,
    pub psd_repairs: usize,
    /// Per-step prior covariance, innovation covariance and gain, when recorded.
    pub factors: Vec<StepFactors>,
}

fn run_inner(seq: &Sequence, model: &FilterModel<'_>, init: &GaussianBelief, record: bool) -> Result<FilterRun> {
    seq.validate(model.system)?;
    if init.mean.len() != model.system.state_dim() {
        return Err(Error::invalid("initial belief dimension does not match the model"));
    }
    let mut belief = init.clone();
    let mut run = FilterRun::default();
    for t in 0..seq.len() {
        let prior = predict(&belief, &seq.controls[t], model, t)?;
        let (post, diag, factors) = update_inner(&prior, &seq.measurements[t], model, t).map_err(|e| e.at_step(t))?;
        run.means.push(post.mean.clone());
        run.innovation_norms.push(diag.innovation_norm);
        run.cov_traces.push(post.cov.trace());
        run.psd_repairs += usize::from(diag.psd_repaired);
        if record {
            run.factors.push(factors);
        }
        belief = post;
    }
    Ok(run)
}

/// Alternates predict and update over the whole sequence.
pub fn run_filter(seq: &Sequence, model: &FilterModel<'_>, init: &GaussianBelief) -> Result<FilterRun> {
    run_inner(seq, model, init, false)
}

/// Like [`run_filter`], additionally keeping `Σ_{t|t−1}`, `S_t` and `K_t`.
pub fn run_filter_recording(seq: &Sequence, model: &FilterModel<'_>, init: &GaussianBelief) -> Result<FilterRun> {
    run_inner(seq, model, init, true)
}

/// Runs the range-bearing EKF on a trajectory with the given noise matrices,
/// starting from [`initial_belief`].
pub fn run_trajectory(traj: &Trajectory, noise: &NoiseMatrices) -> Result<FilterRun> {
    let system = RangeBearingModel::new(traj.landmark_count())?;
    let model = FilterModel::new(&system, &noise.q, &noise.r)?;
    run_filter(&traj.to_sequence(), &model, &initial_belief(traj)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, NoiseSpec, ScenarioConfig};
    use crate::system::LinearModel;

    fn scalar_model() -> LinearModel {
        LinearModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = crate::dataset::rng::Sampler::new(seed, 0);
        let a = DMatrix::from_fn(n, n, |_, _| s.normal());
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn scalar_gain() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (k, s) = kalman_gain(&one, &one, &one, DEFAULT_CONDITION_CAP).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s[(0, 0)], 2.0);

        let big = DMatrix::from_element(1, 1, 1e12);
        let (k, _) = kalman_gain(&one, &one, &big, DEFAULT_CONDITION_CAP).unwrap();
        assert!(k[(0, 0)].abs() < 1e-11);
    }

    #[test]
    fn gain_satisfies_defining_equation() {
        let mut s = crate::dataset::rng::Sampler::new(5, 1);
        for seed in 0..20 {
            let cov = random_spd(7, seed);
            let r = random_spd(4, seed + 100);
            let h = DMatrix::from_fn(4, 7, |_, _| s.normal());
            let (k, sm) = kalman_gain(&cov, &h, &r, DEFAULT_CONDITION_CAP).unwrap();
            let resid = &k * &sm - &cov * h.transpose();
            assert!(resid.amax() < 1e-10, "{}", resid.amax());
        }
    }

    #[test]
    fn singular_innovation_covariance_is_rejected() {
        let cov = DMatrix::zeros(2, 2);
        let h = DMatrix::identity(2, 2);
        let r = DMatrix::zeros(2, 2);
        assert!(matches!(kalman_gain(&cov, &h, &r, DEFAULT_CONDITION_CAP), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn predict_examples() {
        let sys = RangeBearingModel::new(2).unwrap();
        let q0 = DMatrix::zeros(7, 7);
        let r = DMatrix::identity(4, 4);
        let model = FilterModel::new(&sys, &q0, &r).unwrap();
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0, 0.5, 4.0, 5.0, -3.0, 2.0]), random_spd(7, 3)).unwrap();
        assert_eq!(predict(&b, &[0.0, 0.0], &model, 0).unwrap(), b);

        let q = random_spd(7, 9);
        let model = FilterModel::new(&sys, &q, &r).unwrap();
        let zero = GaussianBelief::new(b.mean.clone(), DMatrix::zeros(7, 7)).unwrap();
        assert_eq!(predict(&zero, &[1.0, 0.2], &model, 0).unwrap().cov, q);
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let sys = RangeBearingModel::new(3).unwrap();
        let q = random_spd(9, 1);
        let r = DMatrix::identity(6, 6);
        let model = FilterModel::new(&sys, &q, &r).unwrap();
        let mean = DVector::from_vec(vec![1.0, -2.0, 2.5, 4.0, 5.0, -3.0, 2.0, 7.0, 1.0]);
        let cov = random_spd(9, 2);
        let out = predict(&GaussianBelief::new(mean.clone(), cov.clone()).unwrap(), &[2.0, 0.4], &model, 0).unwrap();
        // entrywise triple sum over an explicitly built F
        let mut f = DMatrix::<f64>::identity(9, 9);
        f[(0, 2)] = -2.0 * 2.5f64.sin();
        f[(1, 2)] = 2.0 * 2.5f64.cos();
        for i in 0..9 {
            for j in 0..9 {
                let mut acc = q[(i, j)];
                for a in 0..9 {
                    for b in 0..9 {
                        acc += f[(i, a)] * cov[(a, b)] * f[(j, b)];
                    }
                }
                assert!((out.cov[(i, j)] - acc).abs() < 1e-12);
            }
        }
        assert!((out.mean[0] - (1.0 + 2.0 * 2.5f64.cos())).abs() < 1e-15);
        assert!((out.mean[2] - 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_mean_and_shrinks_trace() {
        let sys = RangeBearingModel::new(2).unwrap();
        let q = DMatrix::zeros(7, 7);
        let r = DMatrix::identity(4, 4) * 0.1;
        let model = FilterModel::new(&sys, &q, &r).unwrap();
        let b = GaussianBelief::new(DVector::from_vec(vec![0.0, 0.0, 0.3, 4.0, 5.0, -3.0, 2.0]), random_spd(7, 4)).unwrap();
        let y = sys.observe(&b.mean).unwrap();
        let (post, diag) = update(&b, &y, &model, 0).unwrap();
        assert_eq!(post.mean, b.mean);
        assert!(post.cov.trace() < b.cov.trace());
        assert_eq!(diag.innovation_norm, 0.0);

        let r_huge = DMatrix::identity(4, 4) * 1e12;
        let model = FilterModel { condition_cap: 1e20, ..FilterModel::new(&sys, &q, &r_huge).unwrap() };
        let y2 = y.add_scalar(0.5);
        let (post, _) = update(&b, &y2, &model, 0).unwrap();
        assert!((&post.mean - &b.mean).amax() < 1e-9);
        assert!((&post.cov - &b.cov).amax() < 1e-8);
    }

    #[test]
    fn scalar_recursion_matches_closed_form() {
        // x' = x, y = x; textbook scalar KF: p⁻ = p + q, k = p⁻/(p⁻+r), x = x + k(y − x), p = (1−k)p⁻
        let sys = scalar_model();
        let q = DMatrix::from_element(1, 1, 0.3);
        let r = DMatrix::from_element(1, 1, 0.7);
        let model = FilterModel::new(&sys, &q, &r).unwrap();
        let mut s = crate::dataset::rng::Sampler::new(2, 2);
        let ys: Vec<f64> = (0..100).map(|_| s.normal()).collect();
        let seq = Sequence {
            controls: vec![vec![]; 100],
            measurements: ys.iter().map(|&y| DVector::from_element(1, y)).collect(),
            truth: vec![DVector::zeros(1); 100],
        };
        let init = GaussianBelief::new(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let run = run_filter(&seq, &model, &init).unwrap();
        let (mut x, mut p) = (0.2, 2.0);
        for (t, &y) in ys.iter().enumerate() {
            let pp = p + 0.3;
            let k = pp / (pp + 0.7);
            x += k * (y - x);
            p = (1.0 - k) * pp;
            assert!((run.means[t][0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_trajectory_tracks_truth() {
        let cfg = ScenarioConfig { trajectories: 3, ..ScenarioConfig::d2(3, 21) };
        let ds = generate_dataset(&cfg, &NoiseSpec::Noiseless).unwrap();
        for traj in &ds.trajectories {
            let run = run_trajectory(traj, &NoiseMatrices::exact_for(traj)).unwrap();
            for (t, m) in run.means.iter().enumerate() {
                let err = sq_error(&traj.state(t), m);
                assert!(err < 1e-16, "step {t}: {err}");
            }
        }
    }

    fn sq_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut d = a - b;
        d[2] = crate::slam_model::normalize_angle(d[2]);
        d.norm_squared()
    }

    #[test]
    fn exact_statistics_beat_mismatched_ones() {
        let noise = NoiseConfig::new(1e-3, 1e-3, 10.0, 1e3).unwrap();
        let cfg = ScenarioConfig::d2(300, 5);
        let ds = generate_dataset(&cfg, &NoiseSpec::Fixed(noise)).unwrap();
        let a2 = NoiseMatrices::from_config(&NoiseConfig::new(1e-3, 1e-3, 10.0, 1e2).unwrap(), 5);
        let (mut e1, mut e2) = (0.0, 0.0);
        for traj in &ds.trajectories {
            let r1 = run_trajectory(traj, &NoiseMatrices::exact_for(traj)).unwrap();
            let r2 = run_trajectory(traj, &a2).unwrap();
            assert!(r1.means.iter().all(|m| m.iter().all(|v| v.is_finite())));
            for t in 0..traj.horizon() {
                e1 += sq_error(&traj.state(t), &r1.means[t]);
                e2 += sq_error(&traj.state(t), &r2.means[t]);
            }
        }
        assert!(e2 > e1, "mismatched {e2} vs exact {e1}");
    }

    #[test]
    fn bearing_near_pi_does_not_jump() {
        // landmark directly behind the agent: true bearing sits at the ±π seam
        let sys = RangeBearingModel::new(1).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1e-4, 1e-5, 0.0, 0.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-2, 1e-4]));
        let model = FilterModel::new(&sys, &q, &r).unwrap();
        let mean = DVector::from_vec(vec![0.0, 0.0, 0.0, -10.0, 1e-9]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1e-4, 1e-4, 1e-2, 1e-2]));
        let b = GaussianBelief::new(mean.clone(), cov).unwrap();
        for y_b in [std::f64::consts::PI - 1e-4, -std::f64::consts::PI + 1e-4] {
            let y = DVector::from_vec(vec![10.0, y_b]);
            let (post, diag) = update(&b, &y, &model, 0).unwrap();
            assert!(diag.innovation_norm < 1e-2);
            assert!((&post.mean - &mean).amax() < 0.1);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let ds = generate_dataset(&ScenarioConfig::d2(2, 8), &NoiseSpec::training()).unwrap();
        let traj = &ds.trajectories[1];
        let a = run_trajectory(traj, &NoiseMatrices::exact_for(traj)).unwrap();
        let b = run_trajectory(traj, &NoiseMatrices::exact_for(traj)).unwrap();
        assert_eq!(a, b);
    }
}
