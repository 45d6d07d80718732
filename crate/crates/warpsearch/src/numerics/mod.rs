//! Tensor math foundation: 4-D tensors, reverse-mode autodiff, convolution,
//! bilinear sampling, and a finite-difference gradient checker.
//!
//! Everything operates on `(N, C, H, W)` arrays (`ndarray::Array4`).  Scalars
//! ride along as `(1, 1, 1, 1)` tensors so losses stay inside the graph.
//! Coordinates follow image convention: `x` indexes columns (width), `y`
//! indexes rows (height).  The element type is generic over [`Scalar`] so the
//! same graph code runs in `f32` for training and `f64` for gradient checks.

mod conv;
mod gemm;
mod gradcheck;
mod graph;
mod sample;

pub use conv::{conv2d_forward, depthwise_forward};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{tv_value as tv_of_batch, Grads, Graph, TensorId};
pub use sample::{affine_to_flow, bilinear_resize, grid_warp};

use ndarray::Array4;

use crate::error::{Error, Result};

/// 4-D tensor in `(N, C, H, W)` layout.
pub type Tensor<T> = Array4<T>;

/// Element types the numeric stack supports.
///
/// `f32` is the training dtype; `f64` exists for finite-difference gradient
/// verification.  The trait also routes matrix multiplication to a runtime
/// SIMD-dispatched kernel so convolution throughput does not depend on how
/// the host advertises its CPU model.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// `c = a.dot(b) + beta * c` for row-major views.
    fn gemm(
        c: ndarray::ArrayViewMut2<Self>,
        a: ndarray::ArrayView2<Self>,
        b: ndarray::ArrayView2<Self>,
        beta: Self,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm(
        c: ndarray::ArrayViewMut2<Self>,
        a: ndarray::ArrayView2<Self>,
        b: ndarray::ArrayView2<Self>,
        beta: Self,
    ) {
        gemm::gemm_f32(c, a, b, beta);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm(
        c: ndarray::ArrayViewMut2<Self>,
        a: ndarray::ArrayView2<Self>,
        b: ndarray::ArrayView2<Self>,
        beta: Self,
    ) {
        gemm::gemm_f64(c, a, b, beta);
    }
}

/// Description of one convolution from the searchable operation set.
///
/// Supported kernels are 1, 3, 4, 5.  Depthwise-separable variants exist for
/// kernels 1 and 3 only, and kernel 4 exists only as a stride-2 downsampler.
/// Padding is derived, never stored: `(k - 1) / 2` for odd kernels, 1 for
/// kernel 4.  Under stride 1 this preserves spatial size exactly; under
/// stride 2 it halves even inputs exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub depthwise_separable: bool,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: usize,
        depthwise_separable: bool,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            depthwise_separable,
            stride,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kernel, 1 | 3 | 4 | 5) {
            return Err(Error::ConvSpec(format!(
                "kernel {} not in {{1, 3, 4, 5}}",
                self.kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::ConvSpec(format!(
                "stride {} not in {{1, 2}}",
                self.stride
            )));
        }
        if self.depthwise_separable && !matches!(self.kernel, 1 | 3) {
            return Err(Error::ConvSpec(format!(
                "depthwise-separable kernel {} not in {{1, 3}}",
                self.kernel
            )));
        }
        if self.kernel == 4 && self.stride != 2 {
            return Err(Error::ConvSpec(
                "kernel 4 is only defined for stride 2".to_string(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::ConvSpec("channel counts must be positive".to_string()));
        }
        Ok(())
    }

    /// Derived padding, symmetric on both axes.
    pub fn padding(&self) -> usize {
        if self.kernel == 4 {
            1
        } else {
            (self.kernel - 1) / 2
        }
    }

    /// Output spatial size for an `(h, w)` input.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        let k = self.kernel;
        let s = self.stride;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }
}

pub(crate) fn shape_err(
    op: &'static str,
    operand: &'static str,
    expected: impl Into<String>,
    got: &[usize],
) -> Error {
    Error::Shape {
        op,
        operand,
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

/// All elements finite.  Used by tests and the optional strict mode of the
/// graph; training loops watch the loss scalar instead for speed.
pub fn all_finite<T: Scalar>(t: &Tensor<T>) -> bool {
    t.iter().all(|v| v.is_finite())
}
