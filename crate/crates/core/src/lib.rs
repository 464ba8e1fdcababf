//! Stain normalization toolkit for histopathology tiles.
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation and AdamW.
//! * [`color`]: images, color histograms, Wasserstein template selection, optical density.
//! * [`classical`]: Reinhard, Macenko and Vahadane baselines.
//! * [`model`]: the decoupled structure/color restaining network.
//! * [`metrics`]: SSIM, MS-SSIM and UQI.
//! * [`pipeline`]: tiling, configuration, checkpoints and the command implementations.

pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod classical;
pub mod color;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
