//! Network layers shared by the three model families.
//!
//! Convolution is cross-correlation (no kernel flip). The time-varying
//! convolution materializes its kernel at solver time `t` as a spline
//! combination of control-point kernels; with a degree-0, single-control
//! basis it is extensionally equal to a plain convolution.

use serde::{Deserialize, Serialize};

use crate::bspline::{eval_spline, BSplineBasis};
use crate::error::{GodeError, Result};
use crate::scalar::Scalar;
use crate::tensor::{tape::Tape, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group-norm group count: 32 unless the channel count is smaller.
pub fn default_num_groups(channels: usize) -> usize {
    channels.min(32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// One bias vector shared across integration time.
    #[default]
    Constant,
    /// Bias is spline-parameterized like the kernel.
    Spline,
}

pub struct Conv2d<S: Scalar> {
    pub kernel: Tensor<S>, // [C_out, C_in, kh, kw]
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(kernel: Tensor<S>, bias: Option<Tensor<S>>, stride: usize, padding: usize) -> Self {
        Conv2d {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        tape.conv2d(
            x,
            &self.kernel,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }
}

/// Bias of a time-varying convolution.
pub enum TvBias<S: Scalar> {
    Constant(Tensor<S>),
    Spline(Vec<Tensor<S>>),
}

/// Convolution whose kernel is a B-spline combination of `n` control-point
/// kernels, evaluated at the solver time `t`. Stride 1, padding 1.
pub struct TimeVaryingConv<S: Scalar> {
    pub basis: BSplineBasis,
    pub control_kernels: Vec<Tensor<S>>, // n tensors, each [C_out, C_in, 3, 3]
    pub bias: TvBias<S>,
}

impl<S: Scalar> TimeVaryingConv<S> {
    pub fn new(
        basis: BSplineBasis,
        control_kernels: Vec<Tensor<S>>,
        bias: TvBias<S>,
    ) -> Result<Self> {
        if control_kernels.len() != basis.n_control() {
            return Err(GodeError::Config(format!(
                "time-varying conv needs {} control kernels, got {}",
                basis.n_control(),
                control_kernels.len()
            )));
        }
        if let TvBias::Spline(b) = &bias {
            if b.len() != basis.n_control() {
                return Err(GodeError::Config(format!(
                    "spline bias needs {} control vectors, got {}",
                    basis.n_control(),
                    b.len()
                )));
            }
        }
        Ok(TimeVaryingConv {
            basis,
            control_kernels,
            bias,
        })
    }

    /// Kernel materialized at `t`, recorded on the tape so gradients flow to
    /// the control kernels weighted by the basis values.
    pub fn kernel_at(&self, tape: &Tape<S>, t: f64) -> Result<Tensor<S>> {
        eval_spline(tape, &self.basis, &self.control_kernels, t)
    }

    pub fn bias_at(&self, tape: &Tape<S>, t: f64) -> Result<Tensor<S>> {
        match &self.bias {
            TvBias::Constant(b) => Ok(b.clone()),
            TvBias::Spline(ctrl) => eval_spline(tape, &self.basis, ctrl, t),
        }
    }

    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        let kernel = self.kernel_at(tape, t)?;
        let bias = self.bias_at(tape, t)?;
        tape.conv2d(x, &kernel, Some(&bias), 1, 1)
    }
}

pub struct GroupNorm<S: Scalar> {
    pub num_groups: usize,
    pub scale: Tensor<S>, // [C]
    pub shift: Tensor<S>, // [C]
    pub eps: f64,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        tape.group_norm(x, &self.scale, &self.shift, self.num_groups, self.eps)
    }
}

/// Affine head: `x [N,C] * w [C,K] + b [K]`.
pub fn linear<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(&y, b)
}
