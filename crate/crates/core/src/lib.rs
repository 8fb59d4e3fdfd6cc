//! Multi-appearance language-embedded Gaussian splatting for open-vocabulary
//! segmentation, run end to end on a synthetic in-the-wild world.

pub mod ablation;
pub mod autoencoder;
pub mod config;
pub mod error;
pub mod field;
pub mod metrics;
pub mod pipeline;
pub mod query;
pub mod raster;
pub mod seed;
pub mod splat;
pub mod tensor;
pub mod uncertainty;
pub mod wildscene;

pub use error::{Error, Result};
