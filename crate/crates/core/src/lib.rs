//! Pan-sharpening toolkit.

pub mod fusion;
pub mod io;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod protocol;
pub mod raster;
