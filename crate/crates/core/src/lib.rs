//! Tape-based autodiff, a compact ViT encoder and a zoo of parameter-efficient
//! fine-tuning methods, centred on an input-conditioned dynamic adapter that
//! generates per-sample channel-wise convolution kernels.
//!
//! The crate is `no_std` + `alloc`. File formats, configuration parsing and the
//! command line live in the `icon-peft` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapters;
pub mod backbone;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
mod real;
mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
