//! Boundary-aware lightweight transformer for medical image segmentation.
//!
//! The crate is `no_std` with `alloc`. It contains a small reverse-mode
//! tensor engine, the segmentation network (U-shaped CNN backbone,
//! cross-scale global transformer, entropy-guided boundary-aware local
//! transformer, fusion head), the multi-scale soft supervision objective,
//! evaluation metrics, FLOP/parameter accounting and a deterministic
//! synthetic dataset. File formats and the command line live in the
//! `batformer` crate.
//!
//! Enable the `std` feature for runtime CPU dispatch of the GEMM kernels.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod blt;
pub mod checks;
pub mod cgt;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod supervision;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{BatFormer, ModelConfig, Variant};
pub use real::{Precision, Real};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
