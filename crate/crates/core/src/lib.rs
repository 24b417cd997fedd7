//! Training-free segmentation from frozen vision features: attention-based
//! feature upsampling, prototype clustering, attention-guided assignment,
//! hierarchical merging, calibration and evaluation.

pub mod agg;
pub mod calib;
pub mod crs;
pub mod error;
pub mod evalx;
pub mod hmerge;
pub mod pipeline;
pub mod sauce;
pub mod synth;
pub mod tensors;
mod union_find;

pub use error::{Error, Result};
pub use tensors::{
    read_tensor, write_tensor, AttentionMap, FeatureMap, LabelMap, Matrix, Tensor,
};
pub use union_find::UnionFind;
