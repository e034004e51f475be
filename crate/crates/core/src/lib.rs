//! Two-stage multimodal severity assessment: FVTC features, a multimodal
//! VQ-VAE representation learner, and a multi-task session-level predictor.

pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mrl;
pub mod pipeline;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
