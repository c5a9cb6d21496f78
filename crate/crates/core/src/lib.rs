#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod geometry;
mod math;
pub mod numcore;

pub use error::{Error, Result};
pub use geometry::{iou, union_box, BBox};
pub use numcore::{Gradients, Tape, Tensor, Var};
pub mod nn;
pub mod params;
pub mod rng;
pub mod gradcheck;
pub mod scene;
pub mod proposals;
pub mod kb;
pub mod config;
pub mod refine;
pub mod graphgen;
pub mod imggen;
pub mod model;
pub mod train;
pub mod eval;
pub mod synth;
