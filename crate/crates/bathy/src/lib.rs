//! File formats, configuration, checkpoints and the `bathy` command line
//! around [`bathy_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{BathyError, Result};
