//! Multi-scale neural texture transfer for unpaired image-to-image
//! translation.

pub mod autograd;
pub mod cli;
pub mod error;
pub mod featnet;
pub mod formats;
pub mod generator;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod matchswap;
pub mod metrics;
pub mod nn;
pub mod toy;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Ntx1Error, Result};
pub use grid::{Grid, KernelBank, Shape};
