//! Parameter-efficient fine-tuning of Vision-Transformer encoders for dense
//! multispectral segmentation.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod peft;
pub mod tensor;
pub mod train;
