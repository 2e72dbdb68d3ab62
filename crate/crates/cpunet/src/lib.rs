//! Contour-probabilistic U-Net for grayscale lesion segmentation, with a
//! self-contained f64 autodiff tape, synthetic data generation, and a
//! training/evaluation toolchain.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cpm;
pub mod error;
pub mod gf;
pub mod gradcheck;
pub mod loss;
pub mod mgcsd;
pub mod network;
pub mod pgm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CpError, Result};
pub use network::{CpUnetConfig, ForwardOutput, Network};
pub use tensor::{ParamId, ParamStore, Tape, Tid};
