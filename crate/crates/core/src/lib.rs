//! Image classifiers built around an ODE core.
//!
//! Three model families share one toolkit: plain residual networks, neural
//! ODEs with constant dynamics parameters, and generalized neural ODEs (GODE)
//! whose convolution kernels vary over integration time through a B-spline
//! combination of control-point kernels. The crate provides the tensor engine
//! with reverse-mode differentiation, clamped B-spline bases, the layer set,
//! fixed-step Euler and adaptive Dormand–Prince solvers differentiated by
//! backpropagation through the solver steps, dataset loaders, the SGD
//! training recipe, and a CLI (`gode`) that drives experiments.

pub mod bspline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod odeint;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{GodeError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
