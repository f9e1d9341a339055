//! Linear-Gaussian state-space models and the exact Kalman machinery.
//!
//! Time convention: `x_0 ~ N(mu0, P0)` is never observed. A [`KalmanState`]
//! with `t = 0` is that prior; each step predicts `x_t` with `u_{t-1}` and then
//! conditions on `y_t`.

mod kalman;
mod model;

pub use kalman::{
    batch_posterior_oracle, filter, kalman_predict, kalman_update, predictive_density, riccati_iterate, KalmanState,
    RiccatiResult,
};
pub use model::{simulate, simulate_one_step_task, spectral_radius, LgssModel, Trajectory};
#[cfg(test)]
pub(crate) use model::is_psd;

use thiserror::Error;

use crate::info::InfoError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LgssError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} must be positive definite")]
    NotPositiveDefinite(String),
    #[error("innovation covariance is numerically singular at t = {t}")]
    SingularInnovation { t: usize },
    #[error("joint observation covariance is numerically singular")]
    SingularJoint,
    #[error("model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Info(#[from] InfoError),
}
