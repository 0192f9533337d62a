//! Noise-robust binary land-cover mapping from coarse historical labels.
//!
//! The crate covers the full desk-scale pipeline: synthetic landscape
//! generation with controlled label corruption ([`synth`]), raster I/O and
//! overlapped tiling ([`raster`]), corpus preparation ([`dataset`]), a small
//! tape-based autodiff engine ([`tensor`]) driving an encoder–decoder
//! segmentation network ([`model`]) trained with a determinant-based
//! mutual-information loss or a cross-entropy baseline ([`loss`], [`trainer`]),
//! Bayesian fusion with an ancillary map ([`fusion`]), point-based accuracy
//! assessment and rank correlation ([`eval`]), and land-cover transition
//! accounting ([`transitions`]).

mod error;

pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod model;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod transitions;

pub use error::{Error, Result};
