//! MISNet: multi-scale information sharing and selection network for polyp
//! segmentation, with training, evaluation metrics, and a CLI pipeline.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datapipe;
pub mod decoder;
pub mod fusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod trainer;
pub mod types;
pub mod tensor;

pub use config::{reduced_dim, validate_config, AblationVariant, ModelConfig, RunConfig};
pub use error::{Error, Result};
