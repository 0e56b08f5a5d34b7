//! Label regularization through bi-level optimization.
//!
//! Smoothed training labels mix the one-hot target with a smoothing
//! distribution. Choosing that distribution to minimize the smoothed cross
//! entropy plus a KL penalty towards uniform gives a closed form, a tempered
//! softmax of the model's own logits, which is recomputed every training
//! step. This crate provides the probability kernels, the label builders,
//! every loss in the family, numerical oracles for the closed form, a small
//! MLP trainer and the `labo` command-line tool.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod smoothing;
pub mod train;
pub mod verify;

mod fsutil;

pub use error::{Error, Result};
pub use numerics::{LogitVec, ProbVec};
pub use objectives::ObjectiveBreakdown;
pub use smoothing::{AlphaRule, SmoothedLabel, SmoothingConfig, SmoothingMode};
