//! Prototypical residual network for anomaly detection and localization.
//!
//! A frozen multi-scale encoder embeds each image; residuals against k-means
//! prototypes of normal samples highlight deviations; fusion and multi-size
//! patch attention mix the scales; a U-Net style decoder turns the result
//! into a per-pixel anomaly map. Training uses synthetic anomalies composited
//! from a handful of seen defects and from Perlin-masked textures.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod msa;
pub mod nn;
pub mod pipeline;
pub mod prototype;
pub mod rng;
pub mod synth;
pub mod train;

pub use config::PrnConfig;
pub use error::{PrnError, Result};
