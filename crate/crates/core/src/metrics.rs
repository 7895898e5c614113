//! Mean squared estimation error in decibels, with its spread across
//! trajectories.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slam_model::normalize_angle;

/// Total squared errors at or below this count as exact estimation.
pub const PERFECT_MSE: f64 = 1e-20;

/// Per-trajectory dB values are floored here so one exact trajectory cannot
/// make the spread infinite.
pub const TRAJECTORY_DB_FLOOR: f64 = -200.0;

/// Squared error summed over one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub sum_squared: f64,
    pub steps: usize,
    pub state_dim: usize,
}

impl TrajectoryError {
    pub fn mse(&self) -> f64 {
        self.sum_squared / self.steps as f64
    }
}

/// Aggregated error over a set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// `10 log₁₀` of the squared error norm averaged over all steps; `None` when perfect.
    pub mu_db: Option<f64>,
    /// Same, further divided by the state dimension.
    pub mu_db_per_element: Option<f64>,
    /// Standard deviation of the per-trajectory dB values.
    pub sigma_db: f64,
    /// Standard deviation of the per-trajectory linear MSEs.
    pub sigma_linear: f64,
    pub trajectories: usize,
    pub perfect: bool,
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `‖x − x̂‖²` with the listed components compared as angles.
pub fn squared_error(truth: &DVector<f64>, estimate: &DVector<f64>, angles: &[usize]) -> f64 {
    let mut d = truth - estimate;
    for &i in angles {
        d[i] = normalize_angle(d[i]);
    }
    d.norm_squared()
}

pub fn trajectory_error(truth: &[DVector<f64>], estimates: &[DVector<f64>], angles: &[usize]) -> Result<TrajectoryError> {
    if truth.is_empty() || truth.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} true states",
            estimates.len(),
            truth.len()
        )));
    }
    let n = truth[0].len();
    let mut sum = 0.0;
    for (x, e) in truth.iter().zip(estimates) {
        if x.len() != n || e.len() != n {
            return Err(Error::invalid("state vectors of differing length"));
        }
        sum += squared_error(x, e, angles);
    }
    Ok(TrajectoryError { sum_squared: sum, steps: truth.len(), state_dim: n })
}

/// Aggregates per-trajectory errors; the mean weights every step equally.
pub fn summarize(errors: &[TrajectoryError]) -> Result<MseReport> {
    if errors.is_empty() {
        return Err(Error::invalid("no trajectories to summarize"));
    }
    let n = errors[0].state_dim;
    if errors.iter().any(|e| e.state_dim != n || e.steps == 0) {
        return Err(Error::invalid("trajectory errors of differing state dimension"));
    }
    let total: f64 = errors.iter().map(|e| e.sum_squared).sum();
    let steps: usize = errors.iter().map(|e| e.steps).sum();
    if !total.is_finite() {
        return Err(Error::invalid("non-finite squared error"));
    }
    let mse = total / steps as f64;
    let perfect = mse <= PERFECT_MSE;
    let per_traj_db: Vec<f64> = errors.iter().map(|e| to_db(e.mse()).max(TRAJECTORY_DB_FLOOR)).collect();
    let per_traj_lin: Vec<f64> = errors.iter().map(|e| e.mse()).collect();
    Ok(MseReport {
        mu_db: (!perfect).then(|| to_db(mse)),
        mu_db_per_element: (!perfect).then(|| to_db(mse / n as f64)),
        sigma_db: std_dev(&per_traj_db),
        sigma_linear: std_dev(&per_traj_lin),
        trajectories: errors.len(),
        perfect,
    })
}

/// Mean and spread over whole datasets of estimates.
pub fn mse_db(truth: &[Vec<DVector<f64>>], estimates: &[Vec<DVector<f64>>], angles: &[usize]) -> Result<MseReport> {
    if truth.len() != estimates.len() {
        return Err(Error::invalid(format!("{} estimate runs for {} trajectories", estimates.len(), truth.len())));
    }
    let errors = truth
        .iter()
        .zip(estimates)
        .map(|(x, e)| trajectory_error(x, e, angles))
        .collect::<Result<Vec<_>>>()?;
    summarize(&errors)
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::rng::Sampler;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    type Runs = Vec<Vec<DVector<f64>>>;

    fn constant_error(l: usize, t: usize, n: usize, e: f64) -> (Runs, Runs) {
        let truth = vec![vec![DVector::zeros(n); t]; l];
        let mut est = truth.clone();
        for run in &mut est {
            for x in run.iter_mut() {
                x[0] = e;
            }
        }
        (truth, est)
    }

    #[test]
    fn unit_and_hundred_errors() {
        let (x, e) = constant_error(3, 4, 5, 1.0);
        let r = mse_db(&x, &e, &[]).unwrap();
        assert!(r.mu_db.unwrap().abs() < 1e-12);
        assert!((r.mu_db_per_element.unwrap() + to_db(5.0)).abs() < 1e-12);
        assert_eq!(r.sigma_db, 0.0);
        let (x, e) = constant_error(3, 4, 5, 10.0);
        assert!((mse_db(&x, &e, &[]).unwrap().mu_db.unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_error_is_perfect() {
        let (x, e) = constant_error(2, 3, 3, 0.0);
        let r = mse_db(&x, &e, &[2]).unwrap();
        assert!(r.perfect);
        assert_eq!(r.mu_db, None);
        assert_eq!(r.sigma_db, 0.0);
    }

    #[test]
    fn angles_are_compared_wrapped() {
        let x = vec![vec![DVector::from_vec(vec![0.0, 0.0, PI - 0.1])]];
        let e = vec![vec![DVector::from_vec(vec![0.0, 0.0, -PI + 0.1])]];
        let r = mse_db(&x, &e, &[2]).unwrap();
        assert!((r.mu_db.unwrap() - to_db(0.04)).abs() < 1e-9);
    }

    #[test]
    fn matches_scratch_recomputation() {
        let mut s = Sampler::new(3, 0);
        let (l, t, n) = (7, 9, 4);
        let truth: Vec<Vec<DVector<f64>>> =
            (0..l).map(|_| (0..t).map(|_| DVector::from_fn(n, |_, _| s.normal())).collect()).collect();
        let est: Vec<Vec<DVector<f64>>> =
            (0..l).map(|_| (0..t).map(|_| DVector::from_fn(n, |_, _| s.normal())).collect()).collect();
        let mut total = 0.0;
        let mut per = Vec::new();
        for i in 0..l {
            let mut acc = 0.0;
            for k in 0..t {
                for j in 0..n {
                    let mut d = truth[i][k][j] - est[i][k][j];
                    if j == 1 {
                        d = normalize_angle(d);
                    }
                    acc += d * d;
                }
            }
            total += acc;
            per.push(10.0 * (acc / t as f64).log10());
        }
        let mu = 10.0 * (total / (l * t) as f64).log10();
        let m = per.iter().sum::<f64>() / l as f64;
        let sd = (per.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (l - 1) as f64).sqrt();
        let r = mse_db(&truth, &est, &[1]).unwrap();
        assert!((r.mu_db.unwrap() - mu).abs() < 1e-12);
        assert!((r.sigma_db - sd).abs() < 1e-12);
        assert_eq!(r.trajectories, l);
    }

    #[test]
    fn shape_errors() {
        let (x, mut e) = constant_error(2, 3, 3, 1.0);
        assert!(mse_db(&x, &e[..1], &[]).is_err());
        e[0].pop();
        assert!(mse_db(&x, &e, &[]).is_err());
        assert!(mse_db(&[], &[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn invariant_to_trajectory_order(seed in 0u64..1000, rot in 0usize..6) {
            let mut s = Sampler::new(seed, 1);
            let truth: Vec<Vec<DVector<f64>>> =
                (0..6).map(|_| (0..5).map(|_| DVector::from_fn(3, |_, _| s.normal())).collect()).collect();
            let est: Vec<Vec<DVector<f64>>> =
                (0..6).map(|_| (0..5).map(|_| DVector::from_fn(3, |_, _| 3.0 * s.normal())).collect()).collect();
            let a = mse_db(&truth, &est, &[2]).unwrap();
            let mut t2 = truth.clone();
            let mut e2 = est.clone();
            t2.rotate_left(rot);
            e2.rotate_left(rot);
            let b = mse_db(&t2, &e2, &[2]).unwrap();
            prop_assert!((a.mu_db.unwrap() - b.mu_db.unwrap()).abs() < 1e-12);
            prop_assert!((a.sigma_db - b.sigma_db).abs() < 1e-9);
        }
    }
}
