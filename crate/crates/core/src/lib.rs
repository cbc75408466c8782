//! 2.5D PET/CT tumor segmentation with slice interaction attention.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod render;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SegError};
