//! Range-bearing landmark SLAM: motion model, measurement model, their
//! Jacobians, angle arithmetic and the inverse observation model.
//!
//! The flat state layout is `[x, y, θ, x₁ᴸ, y₁ᴸ, …, x_Mᴸ, y_Mᴸ]` (length `3 + 2M`)
//! and the flat measurement layout is `[r₁, φ₁, …, r_M, φ_M]` (length `2M`).
//! The time step is fixed at one second.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::StateSpaceModel;

const TWO_PI: f64 = 2.0 * PI;

/// Wraps an angle to `[−π, π)`, rejecting non-finite input.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("cannot wrap non-finite angle {a}")));
    }
    Ok(normalize_angle(a))
}

/// Unchecked form of [`wrap_angle`]; NaN and infinities pass through as NaN.
#[inline]
pub fn normalize_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut r = (a + PI).rem_euclid(TWO_PI) - PI;
    // rem_euclid can round up to exactly 2π for inputs just below a multiple of 2π.
    if r >= PI {
        r -= TWO_PI;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// Agent pose. `theta` is kept in `[−π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta: normalize_angle(theta) }
    }

    pub fn origin() -> Self {
        Pose { x: 0.0, y: 0.0, theta: 0.0 }
    }
}

/// Agent pose plus `M ≥ 1` landmark positions. Landmark index is the association identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub pose: Pose,
    pub landmarks: Vec<[f64; 2]>,
}

impl StateVector {
    pub fn new(pose: Pose, landmarks: Vec<[f64; 2]>) -> Result<Self> {
        if landmarks.is_empty() {
            return Err(Error::invalid("a state needs at least one landmark"));
        }
        Ok(StateVector { pose, landmarks })
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn dim(&self) -> usize {
        3 + 2 * self.landmarks.len()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = self.pose.x;
        v[1] = self.pose.y;
        v[2] = self.pose.theta;
        for (m, l) in self.landmarks.iter().enumerate() {
            v[3 + 2 * m] = l[0];
            v[4 + 2 * m] = l[1];
        }
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        let m = landmark_count_for_state_dim(v.len())?;
        let landmarks = (0..m).map(|i| [v[3 + 2 * i], v[4 + 2 * i]]).collect();
        Ok(StateVector { pose: Pose::new(v[0], v[1], v[2]), landmarks })
    }
}

/// Speed and heading increment applied over one second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionInput {
    pub v: f64,
    pub dtheta: f64,
}

impl MotionInput {
    pub fn new(v: f64, dtheta: f64) -> Result<Self> {
        if !v.is_finite() || !dtheta.is_finite() {
            return Err(Error::invalid("motion input must be finite"));
        }
        Ok(MotionInput { v, dtheta })
    }

    pub fn as_control(&self) -> [f64; 2] {
        [self.v, self.dtheta]
    }
}

/// One range-bearing pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBearing {
    pub range: f64,
    pub bearing: f64,
}

/// Measurements of all `M` landmarks in landmark order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub pairs: Vec<RangeBearing>,
}

impl MeasurementVector {
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.pairs.len(),
            self.pairs.iter().flat_map(|p| [p.range, p.bearing]),
        )
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(2) {
            return Err(Error::invalid(format!("measurement length {} is not 2M", v.len())));
        }
        let pairs = v
            .chunks_exact(2)
            .map(|c| RangeBearing { range: c[0], bearing: normalize_angle(c[1]) })
            .collect();
        Ok(MeasurementVector { pairs })
    }
}

pub fn landmark_count_for_state_dim(n: usize) -> Result<usize> {
    if n < 5 || !(n - 3).is_multiple_of(2) {
        return Err(Error::invalid(format!("state dimension {n} is not 3 + 2M with M >= 1")));
    }
    Ok((n - 3) / 2)
}

/// Applies the constant-velocity motion model with additive pose noise `(wˣ, wʸ, wᶿ)`.
pub fn motion_step(state: &StateVector, input: &MotionInput, noise: &[f64]) -> Result<StateVector> {
    if noise.len() != 3 {
        return Err(Error::invalid(format!("process noise must have 3 entries, got {}", noise.len())));
    }
    if noise.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("process noise must be finite"));
    }
    let p = state.pose;
    let pose = Pose {
        x: p.x + input.v * p.theta.cos() + noise[0],
        y: p.y + input.v * p.theta.sin() + noise[1],
        theta: normalize_angle(p.theta + input.dtheta + noise[2]),
    };
    Ok(StateVector { pose, landmarks: state.landmarks.clone() })
}

#[inline]
fn landmark_offset(x: &[f64], m: usize) -> (f64, f64) {
    (x[3 + 2 * m] - x[0], x[4 + 2 * m] - x[1])
}

fn measure_flat(x: &[f64]) -> Result<DVector<f64>> {
    let m_count = landmark_count_for_state_dim(x.len())?;
    let mut out = DVector::zeros(2 * m_count);
    for m in 0..m_count {
        let (dx, dy) = landmark_offset(x, m);
        let r = dx.hypot(dy);
        if r == 0.0 {
            return Err(Error::DegenerateGeometry { landmark: m });
        }
        out[2 * m] = r;
        out[2 * m + 1] = normalize_angle(dy.atan2(dx) - x[2]);
    }
    Ok(out)
}

/// Noise-free range and bearing to every landmark.
pub fn measure(state: &StateVector) -> Result<MeasurementVector> {
    let flat = measure_flat(state.to_flat().as_slice())?;
    MeasurementVector::from_flat(flat.as_slice())
}

fn jacobian_f_flat(x: &[f64], v: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut f = DMatrix::identity(n, n);
    f[(0, 2)] = -v * x[2].sin();
    f[(1, 2)] = v * x[2].cos();
    f
}

/// Jacobian of the motion model with respect to the state.
pub fn jacobian_f(state: &StateVector, input: &MotionInput) -> DMatrix<f64> {
    jacobian_f_flat(state.to_flat().as_slice(), input.v)
}

fn jacobian_h_flat(x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let m_count = landmark_count_for_state_dim(n)?;
    let mut h = DMatrix::zeros(2 * m_count, n);
    for m in 0..m_count {
        let (dx, dy) = landmark_offset(x, m);
        let q = dx * dx + dy * dy;
        if q == 0.0 {
            return Err(Error::DegenerateGeometry { landmark: m });
        }
        let r = q.sqrt();
        let (ri, bi, lx) = (2 * m, 2 * m + 1, 3 + 2 * m);
        h[(ri, 0)] = -dx / r;
        h[(ri, 1)] = -dy / r;
        h[(ri, lx)] = dx / r;
        h[(ri, lx + 1)] = dy / r;
        h[(bi, 0)] = dy / q;
        h[(bi, 1)] = -dx / q;
        h[(bi, 2)] = -1.0;
        h[(bi, lx)] = -dy / q;
        h[(bi, lx + 1)] = dx / q;
    }
    Ok(h)
}

/// Jacobian of the measurement model with respect to the state.
pub fn jacobian_h(state: &StateVector) -> Result<DMatrix<f64>> {
    jacobian_h_flat(state.to_flat().as_slice())
}

/// Contracts an adjoint `Ḡ` (same shape as `H`) against `∂H/∂x`: returns
/// `x̄_k = Σᵢⱼ Ḡᵢⱼ ∂Hᵢⱼ/∂x_k`.
fn jacobian_h_vjp_flat(x: &[f64], adj: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = x.len();
    let m_count = landmark_count_for_state_dim(n)?;
    let mut out = DVector::zeros(n);
    for m in 0..m_count {
        let (dx, dy) = landmark_offset(x, m);
        let q = dx * dx + dy * dy;
        if q == 0.0 {
            return Err(Error::DegenerateGeometry { landmark: m });
        }
        let r = q.sqrt();
        let r3 = q * r;
        let q2 = q * q;
        let (ri, bi, lx) = (2 * m, 2 * m + 1, 3 + 2 * m);
        // H entries are ±A, ±B, ±C, ±D with A = dx/r, B = dy/r, C = dy/q, D = dx/q.
        let ga = -adj[(ri, 0)] + adj[(ri, lx)];
        let gb = -adj[(ri, 1)] + adj[(ri, lx + 1)];
        let gc = adj[(bi, 0)] - adj[(bi, lx)];
        let gd = -adj[(bi, 1)] + adj[(bi, lx + 1)];
        let d_ddx = ga * (dy * dy / r3)
            + gb * (-dx * dy / r3)
            + gc * (-2.0 * dx * dy / q2)
            + gd * ((dy * dy - dx * dx) / q2);
        let d_ddy = ga * (-dx * dy / r3)
            + gb * (dx * dx / r3)
            + gc * ((dx * dx - dy * dy) / q2)
            + gd * (-2.0 * dx * dy / q2);
        out[0] -= d_ddx;
        out[1] -= d_ddy;
        out[lx] += d_ddx;
        out[lx + 1] += d_ddy;
    }
    Ok(out)
}

/// Places a landmark from a range-bearing observation taken at `pose`.
pub fn inverse_observation(pose: &Pose, r: f64, phi: f64) -> Result<(f64, f64)> {
    if !(r > 0.0) || !r.is_finite() || !phi.is_finite() {
        return Err(Error::invalid(format!("inverse observation needs finite r > 0, got r = {r}")));
    }
    let a = pose.theta + phi;
    Ok((pose.x + r * a.cos(), pose.y + r * a.sin()))
}

/// Flat-vector range-bearing SLAM model with `M` landmarks.
#[derive(Debug, Clone)]
pub struct RangeBearingModel {
    landmarks: usize,
    state_angles: [usize; 1],
    meas_angles: Vec<usize>,
}

impl RangeBearingModel {
    pub fn new(landmarks: usize) -> Result<Self> {
        if landmarks == 0 {
            return Err(Error::invalid("at least one landmark is required"));
        }
        Ok(RangeBearingModel {
            landmarks,
            state_angles: [2],
            meas_angles: (0..landmarks).map(|m| 2 * m + 1).collect(),
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != 3 + 2 * self.landmarks {
            return Err(Error::invalid(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                3 + 2 * self.landmarks
            )));
        }
        Ok(())
    }
}

impl StateSpaceModel for RangeBearingModel {
    fn state_dim(&self) -> usize {
        3 + 2 * self.landmarks
    }

    fn meas_dim(&self) -> usize {
        2 * self.landmarks
    }

    fn transition(&self, x: &DVector<f64>, control: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let [v, dtheta] = control_pair(control)?;
        let mut out = x.clone();
        out[0] += v * x[2].cos();
        out[1] += v * x[2].sin();
        out[2] = normalize_angle(x[2] + dtheta);
        Ok(out)
    }

    fn transition_jacobian(&self, x: &DVector<f64>, control: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let [v, _] = control_pair(control)?;
        Ok(jacobian_f_flat(x.as_slice(), v))
    }

    fn observe(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        measure_flat(x.as_slice())
    }

    fn observation_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        jacobian_h_flat(x.as_slice())
    }

    fn observation_jacobian_vjp(&self, x: &DVector<f64>, adj: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        jacobian_h_vjp_flat(x.as_slice(), adj)
    }

    fn state_angle_indices(&self) -> &[usize] {
        &self.state_angles
    }

    fn meas_angle_indices(&self) -> &[usize] {
        &self.meas_angles
    }
}

fn control_pair(control: &[f64]) -> Result<[f64; 2]> {
    match control {
        [v, d] => Ok([*v, *d]),
        _ => Err(Error::invalid(format!("control must be (v, dθ), got {} values", control.len()))),
    }
}
