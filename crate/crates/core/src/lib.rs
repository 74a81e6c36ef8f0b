//! Canopy dominant-height mapping from multimodal satellite imagery and
//! spaceborne LiDAR footprints.
//!
//! The crate covers the whole chain: footprint filtering and calibration
//! ([`gedi`]), raster derivation, stacking and patching ([`raster`]), the
//! encoder–decoder network and its tape ([`model`], [`tensor`]), optimization and
//! tiled prediction ([`train`]), accuracy assessment ([`eval`]) and a synthetic
//! world generator ([`synth`]) for running everything without real data.

pub mod config;
pub mod error;
pub mod eval;
pub mod gedi;
pub mod model;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
