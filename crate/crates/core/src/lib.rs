//! Salient object detection with intertwined multi-supervision.
//!
//! A VGG-16-shaped encoder feeds per-block mutual-learning modules (K student
//! branches trained with a pairwise L2 mimicry loss) and edge modules on the
//! three shallow blocks; a deeply supervised U-shaped decoder produces the
//! final saliency map. Training alternates mask and foreground-contour
//! supervision across heads and consumes one saliency image plus one edge
//! image per step. Everything runs at f64 on the CPU so gradients, checkpoint
//! round-trips and loss logs are exactly reproducible.

pub mod archive;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod edge;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod nn;
pub mod rng;
pub mod supervision;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, ProbabilityMap, Tensor};
