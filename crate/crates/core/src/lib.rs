//! Single-stage joint dehazing and infrared/visible image fusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`gradcheck`]: a small dense-tensor engine with
//!   reverse-mode gradients and a finite-difference verifier.
//! * [`haze`]: atmospheric scattering synthesis and dark-channel haze density.
//! * [`nn`]: the prompt-generation, restoration and fusion networks.
//! * [`loss`], [`metrics`]: training objectives and fusion-quality scores.
//! * [`train`], [`format`], [`config`], [`imageio`], [`pipeline`]: the
//!   training harness, file formats and inference entry points.

pub mod autograd;
pub mod config;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod haze;
pub mod imageio;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ConvParams, Real, Shape, Tensor};
