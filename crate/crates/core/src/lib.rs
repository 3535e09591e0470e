//! Two-stage click-through-rate modelling: contrastive alignment of a
//! collaborative tower with a text tower over rendered prompts, followed by
//! supervised fine-tuning of the collaborative tower alone.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod finetune;
pub mod metrics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod parallel;
pub mod prompt;
pub mod synthetic;
pub mod viz;

#[cfg(test)]
pub(crate) mod fixtures;

pub use error::{CheckpointError, CtrlError, Result};
