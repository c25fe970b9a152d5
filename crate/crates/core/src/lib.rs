//! Core numerics for through-water bathymetry: refraction geometry and scene
//! synthesis, linear SVR refraction correction, a small reverse-mode autodiff
//! engine, the Swin-BathyUNet depth regressor with its boundary-sensitive
//! loss, the training loop, and hydrographic accuracy metrics.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! files and the command line live in the `bathy` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod refraction;
pub mod rng;
pub mod svr;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use raster::{DepthRaster, NormalizationSpec, RgbRaster};
pub use tensor::{Graph, Real, Tensor, Var};
