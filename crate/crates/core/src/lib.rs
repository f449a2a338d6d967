//! Saliency-guided region editing with a learned realism critic.

pub mod checkpoint;
pub mod critic;
pub mod edit_ops;
pub mod error;
pub mod estimator;
pub mod image;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod saliency;
pub mod sample_generator;
pub mod stats;
pub mod synth;

pub use error::{ForgeError, Result};
