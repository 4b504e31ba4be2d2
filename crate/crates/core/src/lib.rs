//! Multi-view photometric harmonization with predicted bilateral grids.
//!
//! A transformer looks at a reference view and a set of source views of the
//! same scene and predicts, per source view, a low-resolution 3D bilateral
//! grid of affine colour transforms plus a log-confidence grid. Slicing the
//! grids against the full-resolution sources yields harmonized images and
//! per-pixel confidence maps that can down-weight unreliable pixels in a
//! downstream reconstruction.

pub mod autodiff;
pub mod error;
pub mod fit;
pub mod grid;
pub mod image;
pub mod io;
pub mod isp;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod recon;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
pub use grid::{BilateralGrid, ConfidenceGrid, ConfidenceMap, GridDims};
pub use image::Image;
