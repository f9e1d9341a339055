//! Information bottleneck for i.i.d. data on synthetic nuisance tasks.
//!
//! Encoders are diagonal Gaussians `p(x|y)` trained against a fixed `N(0, I)`
//! marginal, so the KL term is a true upper bound on `I(x;y)`. Exact
//! information values are obtained by quantising `x` on a grid and
//! enumerating the whole joint of `(z, n, x)`.

mod quantize;
mod sweeps;
mod task;
mod train;
mod weights;

pub use quantize::{
    measure_invariance, quantization_slack, report_from_joint, stacked_bottleneck_experiment, Grid, InvarianceReport,
    LayerReport, QuantizedChannel, Quantization, StackLayer, StackReport,
};
pub use sweeps::{
    aggregate_covariance, random_sufficient_encoder, random_table_encoder, tc_beta_sweep, weight_kl_sweep, SweepPoint,
};
pub use task::{make_nuisance_task, ConstructionRule, NuisanceTask};
pub use train::{
    accuracy, curve_csv, ibl_loss, info_bound, train_ib, CurveRow, Decoder, DiagGaussian, IblConfig, IblLoss,
    StochasticEncoder, TrainedIb, LOG_STD_MAX, LOG_STD_MIN,
};
pub use weights::{
    flatness_diagnostic, hessian_trace, task_cross_entropy, train_weight_posterior, weight_info_regularized_loss,
    FlatnessReport, WeightLoss, WeightPosterior, WeightTrainConfig,
};

use thiserror::Error;

use crate::info::InfoError;
use crate::nn::NnError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IbError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("quantisation grid would need {0} cells")]
    TooManyCells(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Info(#[from] InfoError),
}
