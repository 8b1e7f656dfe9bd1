//! Multi-level cross-modal incongruity model for multimodal sarcasm
//! detection.
//!
//! A text is compared against its image in two ways: text rows attend over
//! spatially re-weighted image regions, and text rows are matched against
//! the image caption through a bilinear affinity. The two disparity vectors
//! are fused and classified as sarcastic or not.

pub mod checkpoint;
pub mod data;
pub mod encoders;
mod error;
pub mod incongruity;
pub mod layers;
pub mod model;
pub mod training;
pub mod verify;
pub mod visual;

pub use error::{CoreError, Result};
