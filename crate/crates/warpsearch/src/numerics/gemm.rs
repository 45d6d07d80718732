//! Thin bridge from `ndarray` views to the `faer` matrix-multiply kernels.
//!
//! `faer` dispatches on runtime-detected CPU features (not the advertised
//! model string), which keeps single-core GEMM throughput portable across
//! bare metal, VMs, and containers with masked CPUIDs.

use faer::linalg::matmul::matmul;
use faer::{Accum, Par};
use ndarray::{ArrayView2, ArrayViewMut2};

macro_rules! impl_gemm {
    ($name:ident, $t:ty) => {
        /// `c = a.dot(b) + beta * c` (`beta` must be 0 or 1).
        pub(crate) fn $name(
            mut c: ArrayViewMut2<$t>,
            a: ArrayView2<$t>,
            b: ArrayView2<$t>,
            beta: $t,
        ) {
            let (m, k) = a.dim();
            let (k2, n) = b.dim();
            assert_eq!(k, k2, "gemm inner dimensions");
            assert_eq!(c.dim(), (m, n), "gemm output shape");
            let accum = if beta == 0.0 {
                Accum::Replace
            } else {
                assert_eq!(beta, 1.0, "gemm supports beta of 0 or 1");
                Accum::Add
            };
            let (asr, asc) = (a.strides()[0], a.strides()[1]);
            let (bsr, bsc) = (b.strides()[0], b.strides()[1]);
            let (csr, csc) = (c.strides()[0], c.strides()[1]);
            unsafe {
                let fa = faer::MatRef::from_raw_parts(a.as_ptr(), m, k, asr, asc);
                let fb = faer::MatRef::from_raw_parts(b.as_ptr(), k, n, bsr, bsc);
                let fc = faer::MatMut::from_raw_parts_mut(c.as_mut_ptr(), m, n, csr, csc);
                matmul(fc, accum, fa, fb, 1.0, Par::Seq);
            }
        }
    };
}

impl_gemm!(gemm_f32, f32);
impl_gemm!(gemm_f64, f64);
