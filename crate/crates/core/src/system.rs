//! The state-space abstraction shared by every estimator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::slam_model::normalize_angle;

/// A discrete-time model `x' = f(x, u)`, `y = h(x)` with the derivatives the
/// estimators need. `f` must already wrap any angular state components.
pub trait StateSpaceModel: Sync {
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;

    fn transition(&self, x: &DVector<f64>, control: &[f64]) -> Result<DVector<f64>>;
    fn transition_jacobian(&self, x: &DVector<f64>, control: &[f64]) -> Result<DMatrix<f64>>;

    fn observe(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn observation_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `x̄_k = Σᵢⱼ adjᵢⱼ · ∂Hᵢⱼ(x)/∂x_k`, the reverse-mode contraction of the
    /// measurement Jacobian.
    fn observation_jacobian_vjp(&self, x: &DVector<f64>, adj: &DMatrix<f64>) -> Result<DVector<f64>>;

    /// State components that are angles, wrapped to `[−π, π)`.
    fn state_angle_indices(&self) -> &[usize];
    /// Measurement components that are angles, wrapped to `[−π, π)`.
    fn meas_angle_indices(&self) -> &[usize];

    fn wrap_state(&self, x: &mut DVector<f64>) {
        for &i in self.state_angle_indices() {
            x[i] = normalize_angle(x[i]);
        }
    }

    fn wrap_measurement(&self, y: &mut DVector<f64>) {
        for &i in self.meas_angle_indices() {
            y[i] = normalize_angle(y[i]);
        }
    }

    /// `a − b` with angular components wrapped.
    fn state_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        self.wrap_state(&mut d);
        d
    }

    fn measurement_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        self.wrap_measurement(&mut d);
        d
    }
}

/// Linear model `x' = A x + u`, `y = C x`, with no angular components.
/// `u` is an additive offset of length `n` (or empty for none).
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub transition: DMatrix<f64>,
    pub observation: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(transition: DMatrix<f64>, observation: DMatrix<f64>) -> Result<Self> {
        if !transition.is_square() || observation.ncols() != transition.nrows() {
            return Err(Error::invalid(format!(
                "incompatible linear model shapes {:?} and {:?}",
                transition.shape(),
                observation.shape()
            )));
        }
        Ok(LinearModel { transition, observation })
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.transition.nrows() {
            return Err(Error::invalid(format!("state dimension {} != {}", x.len(), self.transition.nrows())));
        }
        Ok(())
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn meas_dim(&self) -> usize {
        self.observation.nrows()
    }

    fn transition(&self, x: &DVector<f64>, control: &[f64]) -> Result<DVector<f64>> {
        self.check(x)?;
        let mut out = &self.transition * x;
        match control.len() {
            0 => {}
            n if n == out.len() => out += DVector::from_column_slice(control),
            n => return Err(Error::invalid(format!("control length {n} does not match state"))),
        }
        Ok(out)
    }

    fn transition_jacobian(&self, x: &DVector<f64>, _control: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(self.transition.clone())
    }

    fn observe(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(&self.observation * x)
    }

    fn observation_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(self.observation.clone())
    }

    fn observation_jacobian_vjp(&self, x: &DVector<f64>, _adj: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(DVector::zeros(x.len()))
    }

    fn state_angle_indices(&self) -> &[usize] {
        &[]
    }

    fn meas_angle_indices(&self) -> &[usize] {
        &[]
    }
}

/// Step-indexed inputs and ground truth consumed by the filters:
/// `controls[t]` moves the estimate to step `t`, `measurements[t]` observes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub controls: Vec<Vec<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub truth: Vec<DVector<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn validate(&self, model: &dyn StateSpaceModel) -> Result<()> {
        let t = self.measurements.len();
        if self.controls.len() != t || self.truth.len() != t {
            return Err(Error::invalid("sequence fields have different lengths"));
        }
        if self.measurements.iter().any(|y| y.len() != model.meas_dim())
            || self.truth.iter().any(|x| x.len() != model.state_dim())
        {
            return Err(Error::invalid("sequence dimensions do not match the model"));
        }
        Ok(())
    }
}
