//! Convolution kernels: standard convolution via im2col + GEMM, and a direct
//! depthwise kernel.  Depthwise-separable convolution is composed at the
//! graph level as depthwise followed by a pointwise 1x1.
//!
//! Weight layouts: standard `(C_out, C_in, k, k)`, depthwise `(C, 1, k, k)`,
//! bias `(1, C_out, 1, 1)`.  Padding is always the symmetric derived padding
//! from [`super::ConvSpec`]; these kernels take it as a plain argument.

use ndarray::{Array4, ArrayView2, ArrayViewMut2, Axis};

use super::{Scalar, Tensor};

/// Cap on the im2col scratch buffer, in elements (about 24 MB of f32).
const COL_BUDGET: usize = 6 * 1024 * 1024;

/// Valid output-column range `[lo, hi)` for one kernel tap, given the input
/// width, output width, stride, and the tap's offset `kx - pad`.
#[inline]
fn valid_range(in_len: usize, out_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = in_len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Number of whole output rows per im2col chunk.
fn rows_per_chunk(k_total: usize, out_w: usize, out_h: usize) -> usize {
    (COL_BUDGET / (k_total * out_w)).clamp(1, out_h)
}

/// Fill `col` (shape `(C_in * k * k, rows * out_w)`) from one input sample.
/// `oy0` is the first output row of the chunk.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    col: &mut ndarray::Array2<T>,
    oy0: usize,
    rows: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let (_, c_in, h, w) = x.dim();
    let out_w = col.dim().1 / rows;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let off_x = kx as isize - pad as isize;
                let (lo, hi) = valid_range(w, out_w, stride, off_x);
                let mut dst = col.row_mut(r);
                let dst = dst.as_slice_mut().expect("col rows are contiguous");
                for ri in 0..rows {
                    let oy = oy0 + ri;
                    let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                    let seg = &mut dst[ri * out_w..(ri + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let xrow = x.index_axis(Axis(0), n);
                    let xrow = xrow.index_axis(Axis(0), ci);
                    let xrow = xrow.row(iy as usize);
                    let xrow = xrow.as_slice().expect("input rows are contiguous");
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let base = lo as isize * stride as isize + off_x;
                    let mut ix = base as usize;
                    for s in seg[lo..hi].iter_mut() {
                        *s = xrow[ix];
                        ix += stride;
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns of `dcol` back onto the input gradient; the exact
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    g_x: &mut Tensor<T>,
    n: usize,
    dcol: &ndarray::Array2<T>,
    oy0: usize,
    rows: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let (_, c_in, h, w) = g_x.dim();
    let out_w = dcol.dim().1 / rows;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let off_x = kx as isize - pad as isize;
                let (lo, hi) = valid_range(w, out_w, stride, off_x);
                let src = dcol.row(r);
                let src = src.as_slice().expect("col rows are contiguous");
                for ri in 0..rows {
                    let oy = oy0 + ri;
                    let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut grow = g_x.index_axis_mut(Axis(0), n);
                    let mut grow = grow.index_axis_mut(Axis(0), ci);
                    let mut grow = grow.row_mut(iy as usize);
                    let grow = grow.as_slice_mut().expect("rows are contiguous");
                    let seg = &src[ri * out_w..(ri + 1) * out_w];
                    let base = lo as isize * stride as isize + off_x;
                    let mut ix = base as usize;
                    for s in seg[lo..hi].iter() {
                        grow[ix] += *s;
                        ix += stride;
                    }
                }
            }
        }
    }
}

/// Standard convolution forward pass.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c_in, h, win) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    debug_assert_eq!(c_in, wc_in, "conv input channels");
    debug_assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (win + 2 * pad - k) / stride + 1;
    let k_total = c_in * k * k;

    let w_flat = w.view().into_shape_with_order((c_out, k_total)).unwrap();
    let mut out = Array4::zeros((n, c_out, out_h, out_w));
    let chunk_rows = rows_per_chunk(k_total, out_w, out_h);
    let mut col = ndarray::Array2::zeros((k_total, chunk_rows * out_w));

    for ni in 0..n {
        let mut oy0 = 0;
        while oy0 < out_h {
            let rows = chunk_rows.min(out_h - oy0);
            let px = rows * out_w;
            if px != col.dim().1 {
                col = ndarray::Array2::zeros((k_total, px));
            }
            im2col(x, ni, &mut col, oy0, rows, k, stride, pad);
            let mut out_n = out.index_axis_mut(Axis(0), ni);
            let mut out_mat = out_n
                .view_mut()
                .into_shape_with_order((c_out, out_h * out_w))
                .unwrap();
            let dst: ArrayViewMut2<T> =
                out_mat.slice_mut(ndarray::s![.., oy0 * out_w..oy0 * out_w + px]);
            T::gemm(dst, w_flat, col.view(), T::zero());
            oy0 += rows;
        }
    }

    if let Some(b) = b {
        debug_assert_eq!(b.dim(), (1, c_out, 1, 1), "bias shape");
        for ni in 0..n {
            for co in 0..c_out {
                let bv = b[[0, co, 0, 0]];
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), co)
                    .mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

/// Standard convolution backward pass.  Returns `(dx, dw, db)`; `dx` is
/// skipped when `need_dx` is false (first layer of a network).
pub(crate) fn conv2d_backward<T: Scalar>(
    g_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c_in, _, _) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, _, out_h, out_w) = g_out.dim();
    let k_total = c_in * k * k;

    let w_flat = w.view().into_shape_with_order((c_out, k_total)).unwrap();
    let mut dw = Array4::zeros(w.raw_dim());
    let mut db = Array4::zeros((1, c_out, 1, 1));
    let mut dx = if need_dx {
        Some(Array4::zeros(x.raw_dim()))
    } else {
        None
    };

    for co in 0..c_out {
        let mut s = T::zero();
        for gv in g_out.index_axis(Axis(1), co).iter() {
            s += *gv;
        }
        db[[0, co, 0, 0]] = s;
    }

    let chunk_rows = rows_per_chunk(k_total, out_w, out_h);
    let mut col = ndarray::Array2::zeros((k_total, chunk_rows * out_w));
    let mut dcol = ndarray::Array2::zeros((k_total, chunk_rows * out_w));

    {
        let mut dw_flat = dw.view_mut().into_shape_with_order((c_out, k_total)).unwrap();
        for ni in 0..n {
            let mut oy0 = 0;
            while oy0 < out_h {
                let rows = chunk_rows.min(out_h - oy0);
                let px = rows * out_w;
                if px != col.dim().1 {
                    col = ndarray::Array2::zeros((k_total, px));
                    dcol = ndarray::Array2::zeros((k_total, px));
                }
                im2col(x, ni, &mut col, oy0, rows, k, stride, pad);
                let g_n = g_out.index_axis(Axis(0), ni);
                let g_mat = g_n
                    .view()
                    .into_shape_with_order((c_out, out_h * out_w))
                    .unwrap();
                let g_chunk: ArrayView2<T> =
                    g_mat.slice(ndarray::s![.., oy0 * out_w..oy0 * out_w + px]);
                // dW += g_chunk . col^T
                T::gemm(dw_flat.view_mut(), g_chunk, col.t(), T::one());
                if let Some(dx) = dx.as_mut() {
                    // dcol = w^T . g_chunk, then scatter back.
                    T::gemm(dcol.view_mut(), w_flat.t(), g_chunk, T::zero());
                    col2im_add(dx, ni, &dcol, oy0, rows, k, stride, pad);
                }
                oy0 += rows;
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution forward pass (one filter per channel, no bias).
pub fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, win) = x.dim();
    let (wc, one, k, _) = w.dim();
    debug_assert_eq!(c, wc, "depthwise channel count");
    debug_assert_eq!(one, 1, "depthwise weight layout");
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (win + 2 * pad - k) / stride + 1;
    let mut out = Array4::zeros((n, c, out_h, out_w));

    for ni in 0..n {
        for ci in 0..c {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let mut op = out.index_axis_mut(Axis(0), ni);
            let mut op = op.index_axis_mut(Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[ci, 0, ky, kx]];
                    let off_x = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(win, out_w, stride, off_x);
                    for oy in 0..out_h {
                        let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xp.row(iy as usize);
                        let xrow = xrow.as_slice().expect("rows contiguous");
                        let mut orow = op.row_mut(oy);
                        let orow = orow.as_slice_mut().expect("rows contiguous");
                        let mut ix = (lo as isize * stride as isize + off_x) as usize;
                        for o in orow[lo..hi].iter_mut() {
                            *o += wv * xrow[ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Depthwise convolution backward pass.  Returns `(dx, dw)`.
pub(crate) fn depthwise_backward<T: Scalar>(
    g_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, win) = x.dim();
    let (_, _, k, _) = w.dim();
    let (_, _, out_h, out_w) = g_out.dim();
    let mut dx = Array4::zeros(x.raw_dim());
    let mut dw = Array4::zeros(w.raw_dim());

    for ni in 0..n {
        for ci in 0..c {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let gp = g_out.index_axis(Axis(0), ni);
            let gp = gp.index_axis(Axis(0), ci);
            let mut dxp = dx.index_axis_mut(Axis(0), ni);
            let mut dxp = dxp.index_axis_mut(Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[[ci, 0, ky, kx]];
                    let mut dw_acc = T::zero();
                    let off_x = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(win, out_w, stride, off_x);
                    for oy in 0..out_h {
                        let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xp.row(iy as usize);
                        let xrow = xrow.as_slice().expect("rows contiguous");
                        let grow = gp.row(oy);
                        let grow = grow.as_slice().expect("rows contiguous");
                        let mut dxrow = dxp.row_mut(iy as usize);
                        let dxrow = dxrow.as_slice_mut().expect("rows contiguous");
                        let mut ix = (lo as isize * stride as isize + off_x) as usize;
                        for g in grow[lo..hi].iter() {
                            dw_acc += *g * xrow[ix];
                            dxrow[ix] += wv * *g;
                            ix += stride;
                        }
                    }
                    dw[[ci, 0, ky, kx]] += dw_acc;
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    /// Direct-summation reference convolution; the oracle for the GEMM path.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c_in, h, win) = x.dim();
        let (c_out, _, k, _) = w.dim();
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (win + 2 * pad - k) / stride + 1;
        let mut out = Array4::zeros((n, c_out, out_h, out_w));
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = b.map_or(0.0, |b| b[[0, co, 0, 0]]);
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < win as isize
                                    {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn pointwise_conv_with_identity_weights_is_identity() {
        let x = rand_tensor((2, 3, 4, 5), 1);
        let mut w = Array4::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let y = conv2d_forward(&x, &w, None, 1, 0);
        assert!(
            x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-12),
            "identity 1x1 conv must reproduce its input"
        );
    }

    #[test]
    fn three_by_three_on_4x4_keeps_spatial_size() {
        // Stride-1 3x3 with derived padding 1 on a (1, 1, 4, 4) input.
        let x = rand_tensor((1, 1, 4, 4), 2);
        let w = rand_tensor((2, 1, 3, 3), 3);
        let y = conv2d_forward(&x, &w, None, 1, 1);
        assert_eq!(y.dim(), (1, 2, 4, 4));
    }

    #[test]
    fn gemm_path_matches_direct_summation_across_the_op_set() {
        // (kernel, stride, pad) covering every searchable standard conv.
        for (k, s) in [(1, 1), (3, 1), (5, 1), (1, 2), (3, 2), (4, 2), (5, 2)] {
            let pad = if k == 4 { 1 } else { (k - 1) / 2 };
            let x = rand_tensor((2, 3, 8, 10), 40 + k as u64);
            let w = rand_tensor((4, 3, k, k), 50 + k as u64);
            let b = rand_tensor((1, 4, 1, 1), 60 + k as u64);
            let got = conv2d_forward(&x, &w, Some(&b), s, pad);
            let want = conv_reference(&x, &w, Some(&b), s, pad);
            let diff = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-10, "kernel {k} stride {s}: max diff {diff}");
        }
    }

    #[test]
    fn backward_satisfies_adjoint_identities() {
        // <conv(x), g> == <x, dx(g)> == <w, dw(g)> + bias terms, checked via
        // directional derivatives against the linear structure of conv.
        for (k, s) in [(3, 1), (4, 2), (5, 2)] {
            let pad = if k == 4 { 1 } else { (k - 1) / 2 };
            let x = rand_tensor((2, 3, 6, 8), 70 + k as u64);
            let w = rand_tensor((4, 3, k, k), 80 + k as u64);
            let y = conv2d_forward(&x, &w, None, s, pad);
            let g = rand_tensor(y.dim(), 90 + k as u64);
            let (dx, dw, db) = conv2d_backward(&g, &x, &w, s, pad, true);
            let dx = dx.unwrap();

            // Linearity in x: <g, conv(x)> == <dx, x>.
            let lhs: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "k {k} s {s} dx adjoint: {lhs} vs {rhs}");

            // Linearity in w: <g, conv_w(x)> == <dw, w>.
            let rhs_w: f64 = dw.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs_w).abs() < 1e-9,
                "k {k} s {s} dw adjoint: {lhs} vs {rhs_w}"
            );

            // Bias gradient is the per-channel sum of g.
            for co in 0..4 {
                let want: f64 = g.index_axis(Axis(1), co).iter().sum();
                assert!((db[[0, co, 0, 0]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn depthwise_matches_per_channel_direct_convolution() {
        for (k, s) in [(1usize, 1usize), (3, 1), (3, 2)] {
            let pad = (k - 1) / 2;
            let x = rand_tensor((2, 4, 6, 7), 100 + k as u64);
            let w = rand_tensor((4, 1, k, k), 110 + k as u64);
            let got = depthwise_forward(&x, &w, s, pad);
            // Reference: for each channel, a standard 1-in 1-out conv.
            for c in 0..4 {
                let xc = x
                    .slice(ndarray::s![.., c..c + 1, .., ..])
                    .to_owned();
                let wc = w
                    .slice(ndarray::s![c..c + 1, .., .., ..])
                    .to_owned();
                let want = conv_reference(&xc, &wc, None, s, pad);
                let gotc = got.slice(ndarray::s![.., c..c + 1, .., ..]);
                let diff = gotc
                    .iter()
                    .zip(want.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff < 1e-10, "depthwise k {k} s {s} channel {c}: {diff}");
            }
        }
    }

    #[test]
    fn depthwise_backward_satisfies_adjoint_identities() {
        let (k, s, pad) = (3usize, 1usize, 1usize);
        let x = rand_tensor((2, 3, 5, 6), 120);
        let w = rand_tensor((3, 1, k, k), 121);
        let y = depthwise_forward(&x, &w, s, pad);
        let g = rand_tensor(y.dim(), 122);
        let (dx, dw) = depthwise_backward(&g, &x, &w, s, pad);
        let lhs: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = dw.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10, "dx adjoint: {lhs} vs {rhs_x}");
        assert!((lhs - rhs_w).abs() < 1e-10, "dw adjoint: {lhs} vs {rhs_w}");
    }
}
