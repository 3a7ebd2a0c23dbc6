//! Representation learning for paired SAR / multispectral satellite patches.
//!
//! The crate covers the dataset container, a synthetic patch generator,
//! spherical sampling with tile2vec neighbour geometry, a small CPU neural
//! network backend, ResNet-style encoders with self-attention, three
//! self-supervised objectives, and segmentation fine-tuning with IoU
//! evaluation.

pub mod batch;
pub mod data;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod geo;
pub mod nn;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
