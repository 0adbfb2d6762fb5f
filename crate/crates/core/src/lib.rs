//! Generation of 360° equirectangular panoramas from a single perspective
//! snapshot.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] – spherical math, snapshot extraction and embedding.
//! * [`nn`] – a small differentiable layer set (convolution, transposed
//!   convolution, batch norm, activations, dropout, fully-connected and the
//!   class-conditioned channel attention wrapper).
//! * [`gan`] – U-Net generator, patch discriminator, continuity padding and
//!   the adversarial / L1 losses.
//! * [`trainer`] – alternating Adam optimisation, model variants and the
//!   scene classifier.
//! * [`checkpoint`] – the binary `ODIG` parameter format.
//! * [`evalkit`] – continuity metrics, Fréchet distance and recognition
//!   rates.
//! * [`dataset`] – corpus ingestion, synthetic panoramas, pair building and
//!   splits.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod gan;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
