//! Numerical core for trigeminal video descriptors.
//!
//! A video clip is encoded into three feature cubes (spatial, temporal and
//! spatial-temporal branches). Self-attention pooling collapses the first two
//! into spatial and temporal token sets, the third is flattened; each view
//! is refined by a stack of self-attention blocks and the three views then
//! exchange information through cross-view attention. The per-view token
//! means, concatenated, form the retrieval descriptor.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and
//! the command-line driver live in the companion `tmt` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod crossview;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod gradsuite;
pub mod kernels;
pub mod math;
pub mod model;
pub mod pooling;
pub mod selfview;
pub mod tensor;

pub use autodiff::{backward, Graph, ParamId, ParamTape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
