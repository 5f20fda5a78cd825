//! Transfer-learning workbench for brain-tumor histopathology patches: cohort
//! manifests and stratified folds, ROI tiling, swappable encoders under three
//! training conditions, case-level evaluation, patch-count sweeps, GradCAM
//! saliency, a 2-D feature atlas and an HTTP inference service.

mod error;
mod util;

pub mod atlas;
pub mod augment;
pub mod cli;
pub mod cohort;
pub mod data;
pub mod encoder;
pub mod evaluator;
pub mod experiments;
pub mod saliency;
pub mod serve;
pub mod synthetic;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};
