//! Desk-scale virtual try-on pipeline.
//!
//! The crate covers the full loop: a procedural dataset generator with exact
//! ground-truth flows and parsings, a cascaded per-part appearance-flow
//! warping network with a global parsing head, a style-aware gradient
//! truncation rule for warp training, a residual U-Net try-on generator,
//! and the metrics used to compare warping strategies.

pub mod config;
pub mod dgt;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;
pub mod warp;

pub use error::{Error, Result};
