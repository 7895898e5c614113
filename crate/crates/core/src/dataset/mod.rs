//! Synthetic range-bearing SLAM datasets.
//!
//! Every trajectory starts at pose `(0, 0, 0)` with `M` landmarks drawn without
//! replacement from the integer grid `[−B, B]²`, excluding the origin and the
//! first noise-free waypoint `(v, 0)`. At each of
//! the `T` one-second steps the agent moves with constant speed `v` and a
//! heading increment `dθ ~ U[−π, π]`; pose noise has covariance `Q` and each
//! measurement vector has noise covariance `R`. An extra measurement of the
//! initial state is kept for landmark initialization.

mod io;
pub mod rng;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION};
use rng::Sampler;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::slam_model::{measure, motion_step, MotionInput, Pose, StateVector};
use crate::system::Sequence;

/// Covariance factors: `Q = σ_w²·diag(q², q², 1)` on the pose block and
/// `R = I_M ⊗ σ_v²·diag(r², 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_w2: f64,
    pub sigma_v2: f64,
    pub q2: f64,
    pub r2: f64,
}

impl NoiseConfig {
    pub fn new(sigma_w2: f64, sigma_v2: f64, q2: f64, r2: f64) -> Result<Self> {
        let cfg = NoiseConfig { sigma_w2, sigma_v2, q2, r2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_w2", self.sigma_w2), ("sigma_v2", self.sigma_v2), ("q2", self.q2), ("r2", self.r2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Pose-noise variances `(σ²_x, σ²_y, σ²_θ)`.
    pub fn process_variances(&self) -> [f64; 3] {
        [self.sigma_w2 * self.q2, self.sigma_w2 * self.q2, self.sigma_w2]
    }

    /// Per-landmark `(σ²_range, σ²_bearing)`.
    pub fn measurement_variances(&self) -> [f64; 2] {
        [self.sigma_v2 * self.r2, self.sigma_v2]
    }
}

/// Process covariance for `M` landmarks, `(3+2M)²`.
pub fn build_q(cfg: &NoiseConfig, landmarks: usize) -> DMatrix<f64> {
    q_from_variances(cfg.process_variances(), landmarks)
}

/// Measurement covariance for `M` landmarks, `(2M)²`.
pub fn build_r(cfg: &NoiseConfig, landmarks: usize) -> DMatrix<f64> {
    r_from_variances(cfg.measurement_variances(), landmarks)
}

pub(crate) fn q_from_variances(var: [f64; 3], landmarks: usize) -> DMatrix<f64> {
    let n = 3 + 2 * landmarks;
    let mut q = DMatrix::zeros(n, n);
    for (i, v) in var.into_iter().enumerate() {
        q[(i, i)] = v;
    }
    q
}

pub(crate) fn r_from_variances(var: [f64; 2], landmarks: usize) -> DMatrix<f64> {
    let mut diag = DVector::zeros(2 * landmarks);
    for m in 0..landmarks {
        diag[2 * m] = var[0];
        diag[2 * m + 1] = var[1];
    }
    DMatrix::from_diagonal(&diag)
}

/// How `(σ_w², σ_v²)` are chosen for each trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Fixed(NoiseConfig),
    /// `σ_w²` and `σ_v²` drawn independently, log-uniform on `[min, max]`.
    LogUniform { min: f64, max: f64, q2: f64, r2: f64 },
    Noiseless,
}

impl NoiseSpec {
    /// Training distribution: both variances log-uniform on `[5e−4, 5e−2]`, `q² = 10`, `r² = 10³`.
    pub fn training() -> Self {
        NoiseSpec::LogUniform { min: 5e-4, max: 5e-2, q2: 10.0, r2: 1e3 }
    }

    fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Fixed(cfg) => cfg.validate(),
            NoiseSpec::LogUniform { min, max, q2, r2 } => {
                if !(*min > 0.0 && max >= min && max.is_finite()) {
                    return Err(Error::invalid(format!("bad log-uniform range [{min}, {max}]")));
                }
                NoiseConfig::new(*min, *max, *q2, *r2).map(|_| ())
            }
            NoiseSpec::Noiseless => Ok(()),
        }
    }
}

/// Noise statistics realized for one trajectory. All zero for noiseless data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedNoise {
    pub sigma_w2: f64,
    pub sigma_v2: f64,
    pub q2: f64,
    pub r2: f64,
}

impl RealizedNoise {
    pub fn process_variances(&self) -> [f64; 3] {
        [self.sigma_w2 * self.q2, self.sigma_w2 * self.q2, self.sigma_w2]
    }

    pub fn measurement_variances(&self) -> [f64; 2] {
        [self.sigma_v2 * self.r2, self.sigma_v2]
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_w2 == 0.0 && self.sigma_v2 == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub landmarks: usize,
    /// Landmarks lie on the integer grid `[−landmark_box, landmark_box]²`.
    pub landmark_box: i64,
    pub speed: f64,
    pub horizon: usize,
    pub trajectories: usize,
    pub seed: u64,
    #[serde(default)]
    pub p_switch: f64,
}

impl ScenarioConfig {
    /// Training scenario: `M = 5`, `v = 5`, `T = 20`.
    pub fn d1(trajectories: usize, seed: u64) -> Self {
        ScenarioConfig { landmarks: 5, landmark_box: 30, speed: 5.0, horizon: 20, trajectories, seed, p_switch: 0.0 }
    }

    /// Test scenario: `M = 5`, `v = 1`, `T = 50`.
    pub fn d2(trajectories: usize, seed: u64) -> Self {
        ScenarioConfig { landmarks: 5, landmark_box: 30, speed: 1.0, horizon: 50, trajectories, seed, p_switch: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmarks == 0 || self.horizon == 0 || self.trajectories == 0 {
            return Err(Error::invalid("landmarks, horizon and trajectories must all be >= 1"));
        }
        if self.landmark_box < 1 {
            return Err(Error::invalid("landmark_box must be >= 1"));
        }
        let side = 2 * self.landmark_box as u64 + 1;
        let capacity = side * side - 1 - first_step_cell(self.speed, self.landmark_box).map_or(0, |_| 1);
        if self.landmarks as u64 > capacity {
            return Err(Error::invalid(format!(
                "{} landmarks exceed the grid capacity of {capacity}",
                self.landmarks
            )));
        }
        if !self.speed.is_finite() {
            return Err(Error::invalid("speed must be finite"));
        }
        if !(0.0..=1.0).contains(&self.p_switch) {
            return Err(Error::invalid(format!("p_switch {} outside [0, 1]", self.p_switch)));
        }
        Ok(())
    }
}

/// One simulated run. `states[t]`, `inputs[t]`, `measurements[t]` refer to
/// step `t + 1`; `inputs[t]` moves `states[t−1]` (or `initial_state`) to `states[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_state: Vec<f64>,
    pub init_measurement: Vec<f64>,
    pub init_measurement_noise: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<MotionInput>,
    pub measurements: Vec<Vec<f64>>,
    pub process_noise: Vec<[f64; 3]>,
    pub measurement_noise: Vec<Vec<f64>>,
    pub landmark_truth: Vec<[f64; 2]>,
    pub noise: RealizedNoise,
    /// Landmark pair whose measurements were swapped at each step, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub swaps: Vec<Option<[usize; 2]>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_truth.len()
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[t])
    }

    pub fn measurement(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.measurements[t])
    }

    pub fn to_sequence(&self) -> Sequence {
        Sequence {
            controls: self.inputs.iter().map(|u| u.as_control().to_vec()).collect(),
            measurements: (0..self.horizon()).map(|t| self.measurement(t)).collect(),
            truth: (0..self.horizon()).map(|t| self.state(t)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub noise: NoiseSpec,
    /// Seed used by association-error injection, when applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub association_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn landmark_count(&self) -> usize {
        self.meta.scenario.landmarks
    }

    pub fn horizon(&self) -> usize {
        self.meta.scenario.horizon
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Keeps the first `n` trajectories.
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut ds = self.clone();
        ds.trajectories.truncate(n);
        ds.meta.scenario.trajectories = ds.trajectories.len();
        ds
    }
}

/// XOR-ed into the dataset seed to key association-error injection during generation.
pub const ASSOCIATION_SEED_SALT: u64 = 0xA550_C1A7_E000_0000;

pub fn generate_dataset(cfg: &ScenarioConfig, noise: &NoiseSpec) -> Result<Dataset> {
    generate_dataset_with(cfg, noise, Execution::default())
}

pub fn generate_dataset_with(cfg: &ScenarioConfig, noise: &NoiseSpec, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    noise.validate()?;
    let trajectories = exec
        .map_range(cfg.trajectories, |i| generate_trajectory(cfg, noise, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        meta: DatasetMeta {
            version: FORMAT_VERSION,
            seed: cfg.seed,
            scenario: cfg.clone(),
            noise: *noise,
            association_seed: None,
        },
        trajectories,
    };
    if cfg.p_switch > 0.0 {
        ds = inject_association_errors(&ds, cfg.p_switch, cfg.seed ^ ASSOCIATION_SEED_SALT)?;
    }
    Ok(ds)
}

/// Grid cell reached by the first noise-free step from the origin, if any.
/// Landmarks are kept off it so a noiseless run never lands on one.
fn first_step_cell(speed: f64, half: i64) -> Option<(i64, i64)> {
    (speed != 0.0 && speed.fract() == 0.0 && speed.abs() <= half as f64).then_some((speed as i64, 0))
}

fn draw_landmarks(s: &mut Sampler, count: usize, half: i64, speed: f64) -> Vec<[f64; 2]> {
    let side = (2 * half + 1) as u64;
    let blocked = first_step_cell(speed, half);
    let mut taken: Vec<u64> = Vec::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cell = s.below(side * side);
        let (ix, iy) = ((cell % side) as i64 - half, (cell / side) as i64 - half);
        if (ix == 0 && iy == 0) || blocked == Some((ix, iy)) || taken.contains(&cell) {
            continue;
        }
        taken.push(cell);
        out.push([ix as f64, iy as f64]);
    }
    out
}

/// Draw order within a trajectory's stream: noise scales (log-uniform only),
/// landmarks, initial measurement noise, then per step `dθ`, `w` (3), `v` (2M).
fn generate_trajectory(cfg: &ScenarioConfig, spec: &NoiseSpec, index: u64) -> Result<Trajectory> {
    let mut s = Sampler::new(cfg.seed, index);
    let noise = match *spec {
        NoiseSpec::Fixed(c) => RealizedNoise { sigma_w2: c.sigma_w2, sigma_v2: c.sigma_v2, q2: c.q2, r2: c.r2 },
        NoiseSpec::LogUniform { min, max, q2, r2 } => {
            let sigma_w2 = s.log_uniform(min, max);
            let sigma_v2 = s.log_uniform(min, max);
            RealizedNoise { sigma_w2, sigma_v2, q2, r2 }
        }
        NoiseSpec::Noiseless => RealizedNoise { sigma_w2: 0.0, sigma_v2: 0.0, q2: 0.0, r2: 0.0 },
    };
    let w_std = noise.process_variances().map(f64::sqrt);
    let v_std = noise.measurement_variances().map(f64::sqrt);
    let m = cfg.landmarks;

    let landmarks = draw_landmarks(&mut s, m, cfg.landmark_box, cfg.speed);
    let mut state = StateVector::new(Pose::origin(), landmarks.clone())?;

    let noisy_measurement = |s: &mut Sampler, state: &StateVector| -> Result<(Vec<f64>, Vec<f64>)> {
        let clean = measure(state)?.to_flat();
        let noise: Vec<f64> = (0..2 * m).map(|i| v_std[i % 2] * s.normal()).collect();
        let mut y = clean + DVector::from_column_slice(&noise);
        for k in 0..m {
            y[2 * k + 1] = crate::slam_model::normalize_angle(y[2 * k + 1]);
        }
        Ok((y.as_slice().to_vec(), noise))
    };

    let initial_state = state.to_flat().as_slice().to_vec();
    let (init_measurement, init_measurement_noise) = noisy_measurement(&mut s, &state)?;

    let horizon = cfg.horizon;
    let mut traj = Trajectory {
        initial_state,
        init_measurement,
        init_measurement_noise,
        states: Vec::with_capacity(horizon),
        inputs: Vec::with_capacity(horizon),
        measurements: Vec::with_capacity(horizon),
        process_noise: Vec::with_capacity(horizon),
        measurement_noise: Vec::with_capacity(horizon),
        landmark_truth: landmarks,
        noise,
        swaps: Vec::new(),
    };
    for _ in 0..horizon {
        let input = MotionInput::new(cfg.speed, s.uniform_range(-PI, PI))?;
        let w = [w_std[0] * s.normal(), w_std[1] * s.normal(), w_std[2] * s.normal()];
        state = motion_step(&state, &input, &w)?;
        let (y, v) = noisy_measurement(&mut s, &state)?;
        traj.states.push(state.to_flat().as_slice().to_vec());
        traj.inputs.push(input);
        traj.measurements.push(y);
        traj.process_noise.push(w);
        traj.measurement_noise.push(v);
    }
    Ok(traj)
}

/// Swaps the measurement pairs of two distinct, uniformly chosen landmarks at
/// each step independently with probability `p_switch`. Ground truth is untouched.
pub fn inject_association_errors(ds: &Dataset, p_switch: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p_switch) {
        return Err(Error::invalid(format!("p_switch {p_switch} outside [0, 1]")));
    }
    let m = ds.landmark_count();
    if m < 2 {
        return Err(Error::invalid("association errors need at least two landmarks"));
    }
    let mut out = ds.clone();
    if p_switch == 0.0 {
        return Ok(out);
    }
    for (i, traj) in out.trajectories.iter_mut().enumerate() {
        let mut s = Sampler::new(seed, i as u64);
        traj.swaps = vec![None; traj.horizon()];
        for t in 0..traj.horizon() {
            if s.uniform() >= p_switch {
                continue;
            }
            let a = s.below(m as u64) as usize;
            let mut b = s.below(m as u64 - 1) as usize;
            if b >= a {
                b += 1;
            }
            let y = &mut traj.measurements[t];
            y.swap(2 * a, 2 * b);
            y.swap(2 * a + 1, 2 * b + 1);
            traj.swaps[t] = Some([a.min(b), a.max(b)]);
        }
    }
    out.meta.scenario.p_switch = p_switch;
    out.meta.association_seed = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slam_model::normalize_angle;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig { landmarks: 3, landmark_box: 30, speed: 5.0, horizon: 8, trajectories: 4, seed, p_switch: 0.0 }
    }

    #[test]
    fn build_q_examples() {
        let q = build_q(&NoiseConfig::new(1.0, 1.0, 1.0, 1.0).unwrap(), 1);
        assert_eq!(q, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0])));

        let q = build_q(&NoiseConfig::new(1e-3, 1e-3, 10.0, 1e3).unwrap(), 5);
        assert_eq!(q.shape(), (13, 13));
        assert!((q[(0, 0)] - 1e-2).abs() < 1e-18);
        assert!((q[(1, 1)] - 1e-2).abs() < 1e-18);
        assert_eq!(q[(2, 2)], 1e-3);
        assert_eq!(q.iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn build_q_is_psd_with_rank_three() {
        let q = build_q(&NoiseConfig::new(0.03, 1.0, 7.0, 1.0).unwrap(), 4);
        let eig = q.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= 0.0));
        assert_eq!(eig.eigenvalues.iter().filter(|&&l| l > 1e-15).count(), 3);
    }

    #[test]
    fn build_r_examples() {
        let r = build_r(&NoiseConfig::new(1.0, 1.0, 1.0, 1.0).unwrap(), 2);
        assert_eq!(r, DMatrix::identity(4, 4));

        let r = build_r(&NoiseConfig::new(1.0, 1e-3, 1.0, 1e3).unwrap(), 5);
        for m in 0..5 {
            assert!((r[(2 * m, 2 * m)] - 1.0).abs() < 1e-15);
            assert_eq!(r[(2 * m + 1, 2 * m + 1)], 1e-3);
        }
    }

    #[test]
    fn build_r_is_kronecker_product() {
        let cfg = NoiseConfig::new(0.2, 0.07, 3.0, 11.0).unwrap();
        let r = build_r(&cfg, 3);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.07 * 11.0, 0.07]));
        let kron = DMatrix::<f64>::identity(3, 3).kronecker(&d);
        assert_eq!(r, kron);
        assert!(r.clone().cholesky().is_some());
    }

    #[test]
    fn noise_config_rejects_non_positive() {
        assert!(NoiseConfig::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(NoiseConfig::new(1.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn shapes_follow_config() {
        let ds = generate_dataset(&ScenarioConfig::d1(12, 1), &NoiseSpec::training()).unwrap();
        assert_eq!(ds.len(), 12);
        for t in &ds.trajectories {
            assert_eq!(t.states.len(), 20);
            assert_eq!(t.measurements.len(), 20);
            assert!(t.states.iter().all(|s| s.len() == 13));
            assert!(t.measurements.iter().all(|y| y.len() == 10));
            assert!(t.inputs.iter().all(|u| u.v == 5.0 && (-PI..=PI).contains(&u.dtheta)));
            assert!((5e-4..=5e-2).contains(&t.noise.sigma_w2));
            assert!((5e-4..=5e-2).contains(&t.noise.sigma_v2));
        }
        let ds = generate_dataset(&ScenarioConfig::d2(3, 1), &NoiseSpec::training()).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.horizon() == 50 && t.inputs[0].v == 1.0));
    }

    #[test]
    fn landmarks_are_distinct_grid_points() {
        let cfg = ScenarioConfig { landmarks: 40, landmark_box: 4, ..small(5) };
        let ds = generate_dataset(&cfg, &NoiseSpec::Noiseless).unwrap();
        for t in &ds.trajectories {
            let mut pts: Vec<(i64, i64)> = t.landmark_truth.iter().map(|l| (l[0] as i64, l[1] as i64)).collect();
            assert!(t.landmark_truth.iter().all(|l| l[0].fract() == 0.0 && l[1].fract() == 0.0));
            assert!(pts.iter().all(|&(x, y)| x.abs() <= 4 && y.abs() <= 4 && (x, y) != (0, 0)));
            pts.sort();
            pts.dedup();
            assert_eq!(pts.len(), 40);
        }
        let too_many = ScenarioConfig { landmarks: 81, landmark_box: 4, ..small(5) };
        assert!(generate_dataset(&too_many, &NoiseSpec::Noiseless).is_err());
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = small(42);
        let a = generate_dataset_with(&cfg, &NoiseSpec::training(), Execution::Sequential).unwrap();
        let b = generate_dataset_with(&cfg, &NoiseSpec::training(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(43), &NoiseSpec::training()).unwrap();
        assert_ne!(a.trajectories[0].states, c.trajectories[0].states);
    }

    #[test]
    fn noiseless_follows_models_exactly() {
        let ds = generate_dataset(&small(9), &NoiseSpec::Noiseless).unwrap();
        for t in &ds.trajectories {
            let mut s = StateVector::from_flat(&t.initial_state).unwrap();
            for k in 0..t.horizon() {
                s = motion_step(&s, &t.inputs[k], &[0.0; 3]).unwrap();
                assert_eq!(s.to_flat().as_slice(), &t.states[k][..]);
                assert_eq!(measure(&s).unwrap().to_flat().as_slice(), &t.measurements[k][..]);
            }
        }
    }

    #[test]
    fn replay_reconstructs_states_and_measurements() {
        let ds = generate_dataset(&small(11), &NoiseSpec::training()).unwrap();
        for t in &ds.trajectories {
            let mut s = StateVector::from_flat(&t.initial_state).unwrap();
            for k in 0..t.horizon() {
                s = motion_step(&s, &t.inputs[k], &t.process_noise[k]).unwrap();
                assert_eq!(s.to_flat().as_slice(), &t.states[k][..]);
                let mut y = measure(&s).unwrap().to_flat() + DVector::from_column_slice(&t.measurement_noise[k]);
                for m in 0..t.landmark_count() {
                    y[2 * m + 1] = normalize_angle(y[2 * m + 1]);
                }
                assert_eq!(y.as_slice(), &t.measurements[k][..]);
            }
        }
    }

    #[test]
    fn process_noise_moments_match_q() {
        let noise = NoiseConfig::new(1e-2, 1e-3, 10.0, 1e3).unwrap();
        let cfg = ScenarioConfig { trajectories: 1000, horizon: 20, ..small(3) };
        let ds = generate_dataset(&cfg, &NoiseSpec::Fixed(noise)).unwrap();
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        let mut count = 0.0;
        for t in &ds.trajectories {
            for w in &t.process_noise {
                let w = nalgebra::Vector3::from_column_slice(w);
                cov += DMatrix::from_column_slice(3, 3, (w * w.transpose()).as_slice());
                count += 1.0;
            }
        }
        cov /= count;
        let target = build_q(&noise, 3).view((0, 0), (3, 3)).into_owned();
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    #[test]
    fn association_injection_contract() {
        let ds = generate_dataset(&small(4), &NoiseSpec::training()).unwrap();
        assert_eq!(inject_association_errors(&ds, 0.0, 1).unwrap(), ds);

        let two = ScenarioConfig { landmarks: 2, ..small(4) };
        let ds2 = generate_dataset(&two, &NoiseSpec::training()).unwrap();
        let swapped = inject_association_errors(&ds2, 1.0, 1).unwrap();
        for (a, b) in ds2.trajectories.iter().zip(&swapped.trajectories) {
            assert_eq!(a.states, b.states);
            for (ya, yb) in a.measurements.iter().zip(&b.measurements) {
                assert_eq!([ya[2], ya[3], ya[0], ya[1]], [yb[0], yb[1], yb[2], yb[3]]);
            }
        }

        let one = ScenarioConfig { landmarks: 1, ..small(4) };
        let ds1 = generate_dataset(&one, &NoiseSpec::training()).unwrap();
        assert!(inject_association_errors(&ds1, 0.5, 1).is_err());
    }

    #[test]
    fn association_swap_frequency() {
        let cfg = ScenarioConfig { landmarks: 10, horizon: 50, trajectories: 1000, ..small(8) };
        let ds = generate_dataset(&cfg, &NoiseSpec::Noiseless).unwrap();
        let out = inject_association_errors(&ds, 0.05, 99).unwrap();
        let swaps: usize = out.trajectories.iter().map(|t| t.swaps.iter().flatten().count()).sum();
        let freq = swaps as f64 / 50_000.0;
        assert!((freq - 0.05).abs() <= 0.01, "{freq}");
        // pair choice should be roughly uniform over the 45 unordered pairs
        let mut counts = [0usize; 100];
        for t in &out.trajectories {
            for [a, b] in t.swaps.iter().flatten() {
                assert!(a < b);
                counts[a * 10 + b] += 1;
            }
        }
        let used = counts.iter().filter(|&&c| c > 0).count();
        assert_eq!(used, 45);
    }
}
