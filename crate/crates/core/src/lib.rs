//! Self-supervised traversability costmaps for planetary rovers.
//!
//! Simulated drives over synthetic terrain yield IMU-derived cost labels; a
//! BEV network conditioned on a camera embedding learns to predict them from
//! colored LiDAR scans. See the guide in `book/` for a walkthrough.

pub mod bev;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod labeling;
pub mod net;
pub mod raster;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{DenseCostmap, GridSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/bev.md")]
    mod bev {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
