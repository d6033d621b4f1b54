//! Feed-forward semantic Gaussian splatting.
//!
//! Sparse posed RGB views go through a dual-branch camera-aware feature
//! extractor, a plane-sweep depth estimator, and per-pixel decoders that emit
//! dual Gaussians (shared position/opacity, separate color and semantic
//! attributes). A tile-based rasterizer renders RGB, class probabilities,
//! labels and depth for novel cameras.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod depth;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
