//! Language-guided semantic segmentation at desk scale.
//!
//! A toy image encoder builds a feature pyramid, a bag-of-words text encoder embeds the
//! prompt, and a fusion decoder broadcasts the text into every pyramid level before mixing
//! the levels with learnable convex weights and predicting per-pixel class probabilities.
//! Gradients come from a small recorded-operation [`tape`], checked against central
//! differences by [`gradcheck`].
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `std` feature to let the matrix
//! kernels pick SIMD paths at runtime.

#![no_std]

extern crate alloc;

pub mod adam;
pub mod augment;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use mask::ClassMask;
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
