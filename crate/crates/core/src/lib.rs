//! Wavelet-domain protective perturbations against face swapping.
//!
//! The crate trains a small encoder / perturbation-generator / decoder stack
//! (plus a discriminator) that hides an amplitude-bounded perturbation in the
//! low-frequency Haar band of an image so that a differentiable face-swap
//! surrogate mangles its output, while the protected image stays visually
//! close to the original. Everything runs on a hand-rolled reverse-mode
//! autodiff core that is generic over the float type.

pub mod dataio;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod protector;
pub mod rng;
pub mod scalar;
pub mod surrogate;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for training and inference. Chosen for single-core speed;
/// swap to `f64` (everything is generic) when precision matters more than time.
pub type Real = f32;

pub type Tensor = tensor::Tensor<Real>;
pub type Tensor64 = tensor::Tensor<f64>;
