//! Volumetric segmentation with a 3D U-Net family of networks.
//!
//! The crate is self-contained: a small dense tensor type with a reverse-mode
//! tape ([`tensor`]), the network blocks and the three architecture variants
//! ([`nn`]), the Dice + binary cross-entropy training loss ([`losses`]),
//! overlap and surface metrics ([`metrics`]), volume I/O and preprocessing
//! ([`data`]), the optimization loop ([`train`]) and synthetic data plus
//! brute-force reference implementations used to check everything else
//! ([`synth`]).
//!
//! All arithmetic is single-threaded with a fixed accumulation order, so a
//! run is bit-reproducible for a given seed on a given build.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tensor, Tape, Var};
