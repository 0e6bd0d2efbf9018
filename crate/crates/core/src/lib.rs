//! Terrain segmentation on procedurally generated worlds.
//!
//! The crate covers the whole pipeline: fractal height/moisture synthesis and
//! hillshaded rendering ([`worldgen`]), latitude-corrected patch cropping
//! ([`sampler`]), clustering-based pseudo-labelling ([`labeler`]), a
//! from-scratch U-Net with hand-written backward passes ([`nnet`]), training
//! and checkpoints ([`trainer`]), segmentation metrics ([`evalkit`]), tiled
//! large-image inference ([`tiler`]), the Netpbm/config plumbing shared by
//! all of them ([`netpbm`], [`config`]) and directory-level commands
//! ([`pipeline`]).

pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod grid;
pub mod labeler;
pub mod netpbm;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tiler;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
pub use grid::Grid;
pub use labeler::{LabelMask, TerrainClass};
