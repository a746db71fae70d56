//! Connectivity-error detection for segmented IC SEM images.

pub mod conneval;
pub mod error;
pub mod extfeat;
pub mod neural;
pub mod raster;
pub mod regions;
pub mod report;
pub mod synthgen;
pub mod viadetect;
pub mod wiredetect;

pub use error::{Error, Result};
