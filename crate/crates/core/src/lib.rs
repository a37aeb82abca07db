//! Spiking neural networks built on a simplified leaky integrate-and-fire
//! neuron, trained with per-layer local losses and quantized to signed
//! fixed-point formats whose per-layer word widths are guided by Hessian-trace
//! estimates.
//!
//! The crate is organised bottom-up:
//!
//! - [`neuron`]: the two equivalent neuron forms (four-variable training form,
//!   single-variable inference form), the surrogate derivative and the local
//!   weight gradient.
//! - [`net`]: dense and convolutional spiking layers with frozen random
//!   readouts, local losses, SGD training and evaluation.
//! - [`quant`]: fixed-point formats, stochastic/nearest rounding, clamping
//!   with gradient masking and the quantized layer step.
//! - [`hessian`]: finite-difference Hessian-vector products and the
//!   Hutchinson trace estimator with an exact second-difference oracle.
//! - [`alloc`]: parameter counting, model-size accounting and bit-width
//!   recommendation.
//! - [`data`]: the SEVT event container, time binning and synthetic datasets.

pub mod alloc;
pub mod data;
mod error;
pub mod hessian;
pub mod net;
pub mod neuron;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
