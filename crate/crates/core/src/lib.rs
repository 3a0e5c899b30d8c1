//! Tree crown pseudo-labels from lidar and orthophotos, and an evaluation
//! toolkit for crown instance segmentation.
//!
//! Stages, in pipeline order:
//!
//! * [`pointcloud`]: lidar returns, terrain model, height normalization
//! * [`chm`]: canopy height model from first returns
//! * [`delineate`]: treetops and marker-controlled watershed crowns
//! * [`spectral`]: vegetation index and segment filtering
//! * [`labelset`]: RLE instance masks, tiling, annotation JSON
//! * [`enhancer`]: box-prompted mask refinement through an external segmenter
//! * [`postfilter`]: score gate, NMS and containment filtering
//! * [`eval`]: matching, precision/recall/F1, mIoU and bootstrap intervals
//! * [`pipeline`]: stage drivers and the one-shot run
//! * [`synth`]: seeded synthetic scenes with exact ground truth

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chm;
pub mod delineate;
pub mod enhancer;
pub mod error;
pub mod eval;
pub mod labelset;
pub mod pipeline;
pub mod pointcloud;
pub mod postfilter;
pub mod raster;
pub mod spectral;
pub mod synth;

#[cfg(any(test, feature = "oracles"))]
pub mod oracle;

pub use error::{Error, Result};
