//! Core of a state-space video super-resolution model.
//!
//! Everything here is `no_std` (with `alloc`): the differentiable tensor engine,
//! the selective-scan kernels, model blocks, degradation, metrics and the
//! checkpoint byte format. File and process IO live in the companion crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod propagation;
pub mod reconstruction;
mod real;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
