//! Flow-based blur kernel prior.
//!
//! An invertible flow is trained by maximum likelihood on anisotropic Gaussian
//! blur kernels. Once frozen, its latent space is searched to explain a
//! degraded image, which yields a kernel estimate that stays on the learned
//! kernel manifold. Every gradient in the crate comes from the small
//! reverse-mode engine in [`diff`].
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the command
//! line front end live in the `fkp` crate.
#![no_std]
#![forbid(unsafe_code)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod degrade;
pub mod diff;
pub mod estimate;
pub mod flow;
pub mod kernel;
pub mod math;
pub mod metrics;
pub mod rng;

pub use degrade::{DegradationConfig, Image};
pub use diff::{Tape, Tensor, Var};
pub use flow::{FlowConfig, FlowModel};
pub use kernel::{GaussianKernelParams, Kernel};
