//! State estimators for range-bearing landmark SLAM: a model-based EKF, a
//! learned-gain filter (KalmanNet) and a split learned-gain filter
//! (Split-KalmanNet), with the synthetic data generator and the metrics used
//! to compare them.

pub mod dataset;
pub mod ekf;
pub mod error;
pub mod hybrid;
pub mod kalmannet;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod slam_model;
pub mod split;
pub mod system;
pub mod train;

pub use error::{Error, Result};
