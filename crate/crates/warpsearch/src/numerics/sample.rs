//! Bilinear sampling kernels: resize, flow-field warping, and affine-to-flow
//! expansion.  All sampling clamps source coordinates to the image border
//! (border replication) and uses the half-pixel-center convention for resize
//! (the `align_corners = false` behaviour).

use ndarray::{Array4, Zip};

use super::{Scalar, Tensor};

/// Decompose a real source coordinate into clamped corner indices and the
/// interpolation fraction.  `limit` is the last valid index.
#[inline]
fn corners<T: Scalar>(coord: T, limit: usize) -> (usize, usize, T) {
    let max = T::from_usize(limit).unwrap();
    let c = coord.max(T::zero()).min(max);
    let i0 = c.floor();
    let frac = c - i0;
    let i0 = num_traits::ToPrimitive::to_usize(&i0).unwrap_or(0).min(limit);
    let i1 = (i0 + 1).min(limit);
    (i0, i1, frac)
}

/// Resize `(N, C, H, W)` to `(N, C, out_h, out_w)` by bilinear interpolation.
///
/// Source coordinates use half-pixel centers: output pixel `o` samples input
/// coordinate `(o + 0.5) * in / out - 0.5`, clamped to the border.  Identity
/// when the size is unchanged; constant images stay constant at any size.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize needs non-empty sizes");
    let sy = T::from_usize(h).unwrap() / T::from_usize(out_h).unwrap();
    let sx = T::from_usize(w).unwrap() / T::from_usize(out_w).unwrap();
    let half = T::from_f64_lossy(0.5);

    let mut ys = Vec::with_capacity(out_h);
    for oy in 0..out_h {
        let src = (T::from_usize(oy).unwrap() + half) * sy - half;
        ys.push(corners(src, h - 1));
    }
    let mut xs = Vec::with_capacity(out_w);
    for ox in 0..out_w {
        let src = (T::from_usize(ox).unwrap() + half) * sx - half;
        xs.push(corners(src, w - 1));
    }

    let mut out = Array4::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ni);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut oplane = out.index_axis_mut(ndarray::Axis(0), ni);
            let mut oplane = oplane.index_axis_mut(ndarray::Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = plane[[y0, x0]] * (T::one() - fx) + plane[[y0, x1]] * fx;
                    let bot = plane[[y1, x0]] * (T::one() - fx) + plane[[y1, x1]] * fx;
                    oplane[[oy, ox]] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatter output-side gradients back to the
/// `(in_h, in_w)` input grid.
pub(crate) fn bilinear_resize_backward<T: Scalar>(
    g_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Tensor<T> {
    let (n, c, out_h, out_w) = g_out.dim();
    let sy = T::from_usize(in_h).unwrap() / T::from_usize(out_h).unwrap();
    let sx = T::from_usize(in_w).unwrap() / T::from_usize(out_w).unwrap();
    let half = T::from_f64_lossy(0.5);

    let mut ys = Vec::with_capacity(out_h);
    for oy in 0..out_h {
        let src = (T::from_usize(oy).unwrap() + half) * sy - half;
        ys.push(corners(src, in_h - 1));
    }
    let mut xs = Vec::with_capacity(out_w);
    for ox in 0..out_w {
        let src = (T::from_usize(ox).unwrap() + half) * sx - half;
        xs.push(corners(src, in_w - 1));
    }

    let mut g_in = Array4::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let gplane = g_out.index_axis(ndarray::Axis(0), ni);
            let gplane = gplane.index_axis(ndarray::Axis(0), ci);
            let mut iplane = g_in.index_axis_mut(ndarray::Axis(0), ni);
            let mut iplane = iplane.index_axis_mut(ndarray::Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = gplane[[oy, ox]];
                    iplane[[y0, x0]] += g * (T::one() - fy) * (T::one() - fx);
                    iplane[[y0, x1]] += g * (T::one() - fy) * fx;
                    iplane[[y1, x0]] += g * fy * (T::one() - fx);
                    iplane[[y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    g_in
}

/// Warp `x` by a dense backward flow field.
///
/// `flow` is `(N, 2, H, W)` with channel 0 the x-displacement and channel 1
/// the y-displacement, in pixels.  The output at `(y, x)` samples the input
/// at `(y + flow_y, x + flow_x)` bilinearly, with source coordinates clamped
/// to the border.  Zero flow is the identity; integer flows reproduce exact
/// shifts away from the border.
pub fn grid_warp<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    debug_assert_eq!(flow.dim(), (n, 2, h, w), "grid_warp flow shape");
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for y in 0..h {
            for xc in 0..w {
                let fx = flow[[ni, 0, y, xc]];
                let fy = flow[[ni, 1, y, xc]];
                let sx = T::from_usize(xc).unwrap() + fx;
                let sy = T::from_usize(y).unwrap() + fy;
                let (x0, x1, ax) = corners(sx, w - 1);
                let (y0, y1, ay) = corners(sy, h - 1);
                for ci in 0..c {
                    let top = x[[ni, ci, y0, x0]] * (T::one() - ax) + x[[ni, ci, y0, x1]] * ax;
                    let bot = x[[ni, ci, y1, x0]] * (T::one() - ax) + x[[ni, ci, y1, x1]] * ax;
                    out[[ni, ci, y, xc]] = top * (T::one() - ay) + bot * ay;
                }
            }
        }
    }
    out
}

/// Adjoint of [`grid_warp`] for both inputs.
///
/// The flow gradient is zero wherever the source coordinate was clamped,
/// matching the saturated forward map.
pub(crate) fn grid_warp_backward<T: Scalar>(
    g_out: &Tensor<T>,
    x: &Tensor<T>,
    flow: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dim();
    let mut g_x = Array4::zeros((n, c, h, w));
    let mut g_flow = Array4::zeros((n, 2, h, w));
    let w_last = T::from_usize(w - 1).unwrap();
    let h_last = T::from_usize(h - 1).unwrap();
    for ni in 0..n {
        for y in 0..h {
            for xc in 0..w {
                let fx = flow[[ni, 0, y, xc]];
                let fy = flow[[ni, 1, y, xc]];
                let sx = T::from_usize(xc).unwrap() + fx;
                let sy = T::from_usize(y).unwrap() + fy;
                let (x0, x1, ax) = corners(sx, w - 1);
                let (y0, y1, ay) = corners(sy, h - 1);
                let x_live = sx > T::zero() && sx < w_last;
                let y_live = sy > T::zero() && sy < h_last;
                let mut d_sx = T::zero();
                let mut d_sy = T::zero();
                for ci in 0..c {
                    let g = g_out[[ni, ci, y, xc]];
                    g_x[[ni, ci, y0, x0]] += g * (T::one() - ay) * (T::one() - ax);
                    g_x[[ni, ci, y0, x1]] += g * (T::one() - ay) * ax;
                    g_x[[ni, ci, y1, x0]] += g * ay * (T::one() - ax);
                    g_x[[ni, ci, y1, x1]] += g * ay * ax;
                    let v00 = x[[ni, ci, y0, x0]];
                    let v01 = x[[ni, ci, y0, x1]];
                    let v10 = x[[ni, ci, y1, x0]];
                    let v11 = x[[ni, ci, y1, x1]];
                    d_sx += g * ((T::one() - ay) * (v01 - v00) + ay * (v11 - v10));
                    d_sy += g * ((T::one() - ax) * (v10 - v00) + ax * (v11 - v01));
                }
                if x_live {
                    g_flow[[ni, 0, y, xc]] = d_sx;
                }
                if y_live {
                    g_flow[[ni, 1, y, xc]] = d_sy;
                }
            }
        }
    }
    (g_x, g_flow)
}

/// Expand per-sample affine deltas into a dense flow field.
///
/// `params` is `(N, 6, 1, 1)` holding `[a11, a12, tx, a21, a22, ty]` as
/// deltas from the identity map, so all-zero parameters give zero flow.
/// Coordinates are centered on the image midpoint, in pixels:
/// `flow_x = a11 * u + a12 * v + tx` with `u = x - (w-1)/2`, `v = y - (h-1)/2`.
pub fn affine_to_flow<T: Scalar>(params: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, six, _, _) = params.dim();
    debug_assert_eq!(six, 6, "affine params channel count");
    let cx = T::from_f64_lossy((w as f64 - 1.0) / 2.0);
    let cy = T::from_f64_lossy((h as f64 - 1.0) / 2.0);
    let mut flow = Array4::zeros((n, 2, h, w));
    for ni in 0..n {
        let a11 = params[[ni, 0, 0, 0]];
        let a12 = params[[ni, 1, 0, 0]];
        let tx = params[[ni, 2, 0, 0]];
        let a21 = params[[ni, 3, 0, 0]];
        let a22 = params[[ni, 4, 0, 0]];
        let ty = params[[ni, 5, 0, 0]];
        for y in 0..h {
            let v = T::from_usize(y).unwrap() - cy;
            for xc in 0..w {
                let u = T::from_usize(xc).unwrap() - cx;
                flow[[ni, 0, y, xc]] = a11 * u + a12 * v + tx;
                flow[[ni, 1, y, xc]] = a21 * u + a22 * v + ty;
            }
        }
    }
    flow
}

/// Adjoint of [`affine_to_flow`].
pub(crate) fn affine_to_flow_backward<T: Scalar>(g_flow: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = g_flow.dim();
    let cx = T::from_f64_lossy((w as f64 - 1.0) / 2.0);
    let cy = T::from_f64_lossy((h as f64 - 1.0) / 2.0);
    let mut g_params = Array4::zeros((n, 6, 1, 1));
    for ni in 0..n {
        let mut acc = [T::zero(); 6];
        for y in 0..h {
            let v = T::from_usize(y).unwrap() - cy;
            for xc in 0..w {
                let u = T::from_usize(xc).unwrap() - cx;
                let gx = g_flow[[ni, 0, y, xc]];
                let gy = g_flow[[ni, 1, y, xc]];
                acc[0] += gx * u;
                acc[1] += gx * v;
                acc[2] += gx;
                acc[3] += gy * u;
                acc[4] += gy * v;
                acc[5] += gy;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            g_params[[ni, k, 0, 0]] = *a;
        }
    }
    g_params
}

/// Elementwise check used by sampling tests.
pub(crate) fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let mut m = T::zero();
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = (x - y).abs();
        if d > m {
            m = d;
        }
    });
    m
}
