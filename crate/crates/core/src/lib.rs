//! Open-world lidar panoptic segmentation built on hierarchical segmentation
//! trees, with the evaluation toolkit that goes with it.

pub mod cli;
pub mod clustering;
pub mod error;
pub mod labelxfer;
pub mod lidar_io;
pub mod metrics;
pub mod objectness;
pub mod pipeline;
pub mod segtree;
pub mod spatial;
pub mod synthgen;
pub mod vocab;

pub use error::{Error, Result};
