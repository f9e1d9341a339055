//! Recurrent separating representations for time series.
//!
//! A separator carries a finite state `phi_t` that summarises the past
//! `y^t, u^t`; it is updated by one map `phi_{t+1} = g(phi_t, y_{t+1}, u_t)`
//! and predicts the task `z_{t+k} = y_{t+k+1}` from `phi_t` and the controls
//! `u_t..u_{t+k}`. Three separators share the [`Separator`] interface: the
//! learned [`SepFilterModel`] and two exact references, a covariance-form
//! Kalman filter and the forward filter of a finite HMM.

mod hmm;
mod kalman;
mod model;
mod train;

pub use hmm::{
    hmm_exact_reference, nstep_bound_check, FiniteHMM, HistoryPosterior, HmmReference, HmmSeparator, NStepCheck,
};
pub use kalman::{evaluate_vs_kalman, kalman_reference_nll, EvalRow, KalmanEval, KalmanSeparator};
pub use model::{filter_step, predict_from_posterior, predict_task, OutputKind, SepFilterModel, SepFilterSpec};
pub use train::{dyn_ibl_loss, held_out_sequences, lgss_sequence, train_filter, DynIbConfig, DynIblLoss, FilterCurveRow, TrainedFilter};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::info::{GaussianDistribution, InfoError};
use crate::lgss::{LgssError, Trajectory};
use crate::nn::{NnError, PROB_FLOOR};
use crate::rng::SimRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SepError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite filter state at t = {t}")]
    NonFinite { t: usize },
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("enumeration of {0} histories exceeds the cap")]
    TooLarge(u128),
    #[error("model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error(transparent)]
    Lgss(#[from] LgssError),
}

/// Observation sequence with `observations[t] = y_{t+1}` and
/// `controls[t] = u_t`, the input applied just before `y_{t+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub observations: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

impl From<&Trajectory> for Sequence {
    fn from(traj: &Trajectory) -> Self {
        Self {
            observations: traj.observations.iter().map(|y| y.iter().copied().collect()).collect(),
            controls: traj.controls.iter().map(|u| u.iter().copied().collect()).collect(),
        }
    }
}

/// Predictive law of a task value.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    Gaussian(GaussianDistribution),
    /// Equal-weight mixture of diagonal Gaussians.
    Mixture { means: Vec<Vec<f64>>, vars: Vec<Vec<f64>> },
    Categorical(Vec<f64>),
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

pub(crate) fn diag_log_density(z: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(var)
        .map(|((z, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (z - m).powi(2) / v))
        .sum()
}

impl Predictive {
    /// Negative log-likelihood of `z`; categorical targets are one-hot vectors.
    pub fn nll(&self, z: &[f64]) -> Result<f64, SepError> {
        match self {
            Predictive::Gaussian(g) => Ok(-g.log_density(&DVector::from_column_slice(z))?),
            Predictive::Mixture { means, vars } => {
                let comps: Vec<f64> = means.iter().zip(vars).map(|(m, v)| diag_log_density(z, m, v)).collect();
                Ok(-log_mean_exp(&comps))
            }
            Predictive::Categorical(p) => {
                let idx = z.iter().position(|&v| v == 1.0).ok_or_else(|| SepError::Invalid("categorical target is not one-hot".into()))?;
                Ok(-p[idx].max(PROB_FLOOR).ln())
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Predictive::Gaussian(g) => g.mean().iter().copied().collect(),
            Predictive::Mixture { means, .. } => {
                let s = means.len() as f64;
                (0..means[0].len()).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / s).collect()
            }
            Predictive::Categorical(p) => p.clone(),
        }
    }

    /// Gaussian with the same first two moments (`None` for categorical laws).
    pub fn moment_matched(&self) -> Result<Option<GaussianDistribution>, SepError> {
        match self {
            Predictive::Gaussian(g) => Ok(Some(g.clone())),
            Predictive::Mixture { means, vars } => {
                let m = DVector::from_vec(self.mean());
                let k = m.len();
                let s = means.len() as f64;
                let mut second = DMatrix::zeros(k, k);
                for (mu, v) in means.iter().zip(vars) {
                    let mu = DVector::from_column_slice(mu);
                    second += &mu * mu.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(v));
                }
                let cov = second / s - &m * m.transpose();
                Ok(Some(GaussianDistribution::new(m, cov)?))
            }
            Predictive::Categorical(_) => Ok(None),
        }
    }
}

/// A recursively updated representation that predicts the task.
pub trait Separator {
    type State: Clone;

    fn initial(&self) -> Self::State;

    /// `phi_{t+1}` from `phi_t`, `y_{t+1}` and `u_t`; `t` is used for errors.
    fn update(&self, state: &Self::State, y: &[f64], u: &[f64], t: usize) -> Result<Self::State, SepError>;

    /// Law of `z_{t+k}` given `phi_t` and `controls = [u_t, .., u_{t+k}]`.
    fn predictive(&self, state: &Self::State, controls: &[Vec<f64>], samples: usize, rng: &mut SimRng) -> Result<Predictive, SepError>;

    /// `KL(q(x_t | phi_t) || r(x))`, the per-step information cost.
    fn info_kl(&self, state: &Self::State) -> f64;

    /// States `phi_0 .. phi_{T-1}` along a sequence.
    fn run(&self, seq: &Sequence) -> Result<Vec<Self::State>, SepError> {
        let mut states = Vec::with_capacity(seq.len());
        let mut phi = self.initial();
        for t in 0..seq.len() {
            if t > 0 {
                phi = self.update(&phi, &seq.observations[t - 1], &seq.controls[t - 1], t)?;
            }
            states.push(phi.clone());
        }
        Ok(states)
    }
}
