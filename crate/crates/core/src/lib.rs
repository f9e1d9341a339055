//! Information-bottleneck representations, learned separating filters, and
//! exhaustive checks of the separation principle on finite POMDPs.
//!
//! The crate is organised bottom-up:
//!
//! | module | contents |
//! |--------|----------|
//! | [`nn`] | dense reverse-mode AD, MLPs, losses, SGD with momentum |
//! | [`info`] | exact entropy / KL / MI / TC on finite alphabets, Gaussian closed forms |
//! | [`lgss`] | linear-Gaussian state-space simulator, Kalman filter, Riccati recursion |
//! | [`static_ib`] | i.i.d. information bottleneck training and exact invariance measurement |
//! | [`seprep`] | recurrent separating-representation filters and their oracles |
//! | [`control_sep`] | history-tree Q-functions and belief-grouping checks on POMDPs |
//! | [`harness`] | experiment runner used by the `sepctl` binary and the acceptance suite |
//!
//! Every information quantity is in nats.

pub mod control_sep;
pub mod harness;
pub mod info;
pub mod lgss;
pub mod nn;
pub mod rng;
pub mod seprep;
pub mod static_ib;
