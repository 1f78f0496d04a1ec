//! Counterfactual explanations for image classifiers through a classifier-conditioned
//! style-based generator.
//!
//! The pipeline: train a frozen classifier, train a generator and encoder
//! conditioned on it, discover per-class style coordinates that move the
//! classifier ([`attfind`]), build per-image counterfactuals ([`explain`]) and
//! measure how often they flip the prediction ([`eval`]).

pub mod artifact;
pub mod attfind;
pub mod error;
pub mod eval;
pub mod explain;
pub mod image;
pub mod losses;
pub mod model;
pub mod models;
pub mod oracle_check;
pub mod pipeline;
pub mod report;
pub mod style;
pub mod training;
pub mod worlds;

pub use error::{Error, Result};
pub use model::{Logits, StyleModel};
