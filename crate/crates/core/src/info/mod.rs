//! Exact information quantities on finite alphabets and Gaussian closed forms.
//!
//! All results are in nats and use the convention `0 log 0 = 0`. Divergences
//! that are infinite because of an absolute-continuity failure are returned as
//! `+inf` with a flag rather than as errors, so inequality checks stay total.

mod discrete;
mod gaussian;

pub use discrete::{
    compose_channels, cross_entropy_discrete, entropy, kl_discrete, mi_identity_check, mutual_information,
    total_correlation_discrete, DiscreteChannel, DiscreteDistribution, DiscreteJoint, Divergence, IdentityCheck,
};
pub use gaussian::{
    check_psd, kl_diag_to_standard, kl_gaussian, total_correlation_gaussian, GaussianDistribution, PSD_TOL,
};
#[cfg(test)]
pub(crate) use gaussian::min_eigenvalue;
pub(crate) use gaussian::symmetrize;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("{what} sums to {total}, not 1")]
    NotNormalized { what: String, total: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown axis {0}")]
    UnknownAxis(String),
    #[error("not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}
