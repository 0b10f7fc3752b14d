//! Selective state-space sequence modeling for hyperspectral image
//! classification, end to end: a small reverse-mode autodiff engine, LTI and
//! selective (S6) state-space kernels, the piece-wise scanned spectral
//! sequence model with gated spatial–spectral merging, superpixel-based
//! train/test splitting, training and evaluation loops, and analytic
//! compute-cost accounting.
//!
//! The crate is CPU-only and f64 throughout; cubes are stored as f32 on disk
//! and widened on load. Everything is deterministic given a seed.

pub mod error;
pub mod ndtensor;

pub use error::{Error, Result};
