//! Director-experts (DEX) modular network.
//!
//! A small reverse-mode autodiff engine ([`tensor`]), the image-wise routed
//! expert block with its GEMA-updated director ([`dex`]), the masked
//! reconstruction backbone ([`backbone`]), a synthetic multi-modality data
//! generator ([`synth`]), the optimizer and schedules ([`train`]) and the
//! verification tooling ([`analysis`]).
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the
//! command-line driver live in the `dex` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod backbone;
pub mod dex;
mod error;
pub mod nn;
mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DexError, Result};
pub use real::{Precision, Real};
