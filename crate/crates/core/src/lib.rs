//! Core of the visually prompted keyword localisation toolkit.
//!
//! Everything here is `no_std` with `alloc`: tensors and reverse-mode
//! autodiff, the synthetic corpus, encoders, attention, losses, episode
//! sampling, training and evaluation. File formats and the CLI live in the
//! `vpkl` crate.
#![no_std]

extern crate alloc;

pub mod attention;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod losses;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use graph::{Graph, ReduceKind, Var};
pub use tensor::{Tensor, TensorError};
