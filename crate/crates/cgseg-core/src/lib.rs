//! Core library for context-guided semantic segmentation of tropical
//! cyclones and atmospheric rivers on gridded climate fields.
//!
//! Everything here is pure computation over in-memory values: a small f64
//! tensor type with reverse-mode automatic differentiation, the
//! context-guided network, imbalance-aware losses, segmentation metrics,
//! spherical feature engineering, a synthetic storm dataset generator, and
//! the Adam/plateau-scheduler training loop. File formats and the command
//! line live in the companion `cgseg-cli` crate.
//!
//! The crate is `no_std` compatible (with `alloc`); the default `std`
//! feature only adds `std::error::Error` for [`Error`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::GridTensor;
