//! Masked token-grid generative modeling at desk scale.
//!
//! The crate is organized around the generation pipeline: [`numerics`]
//! provides a small dense-tensor kernel with a reverse-mode gradient tape,
//! [`schedule`] the mask-ratio schedules, [`tokenizer`] a k-means patch
//! quantizer plus synthetic token sources with closed-form statistics,
//! [`model`] a bidirectional transformer over token grids, [`trainer`] the
//! masked-token training loop with checkpointing, [`decoder`] the scheduled
//! parallel decoder with a raster-order autoregressive baseline and
//! mask-constrained editing, and [`bench`] the experiment drivers.

pub mod bench;
pub mod decoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod plot;
pub mod schedule;
pub mod tokenizer;
pub mod trainer;

pub use error::{CoreError, Result};
