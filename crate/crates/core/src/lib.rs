//! Action-signal diagnostics for offline treatment trajectories.
//!
//! The library answers one question about an hourly ICU-style dataset: do
//! the recorded treatment actions carry measurable signal for predicting
//! changes in patient severity, beyond what the states already say? It does
//! so by training small sequence models under three input schemes (actions
//! only, states only, states + actions), scoring them under four test-time
//! action substitutions, and probing action predictability directly with
//! behavior cloning. A synthetic cohort generator with a known causal knob
//! provides ground truth for validating the whole diagnostic.

pub mod bc;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod reporting;
pub mod severity;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
