//! Federated training of fairness-penalized logistic regression.
//!
//! The crate simulates a set of data-holding sites, trains logistic
//! regression with a cross-group fairness penalty under FedAvg or
//! first-order Per-FedAvg, selects the penalty weights from data, and
//! reports AUROC together with demographic-parity and equalized-odds
//! metrics against a centrally trained baseline.

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod seed;
pub mod trainer;
pub mod tuning;

pub use error::{Error, Result};
