//! Multi-contextual video anomaly detection at desk scale.
//!
//! A frame-as-token transformer ([`vit::ContextVit`]) learns appearance
//! normality through masked, whole-future and partial-future prediction over
//! object cubes; a convolutional autoencoder ([`cae::MotionCae`]) learns
//! motion normality from object flow. Their errors are fused into one
//! anomaly score.

pub mod cae;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod training;
pub mod vit;

pub use error::{Result, VadError};
