//! Finite-difference verification for the reverse-mode graph.
//!
//! The harness rebuilds the computation from scratch for every perturbed
//! element, so it is meant for small shapes in `f64`.  Relative error is
//! norm-based per input tensor: `||g_fd - g_an|| / max(||g_fd||, ||g_an||)`,
//! which stays meaningful when individual elements sit near zero.

use ndarray::Array4;

use super::{Graph, Tensor, TensorId};
use crate::error::Result;

/// Outcome of one [`gradient_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Norm-based relative error per input tensor, in input order.
    pub rel_errs: Vec<f64>,
    /// Largest entry of `rel_errs`.
    pub max_rel_err: f64,
    /// Total number of perturbed elements.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the given leaf ids every
/// time it is called; all leaves are treated as trainable.  `eps` is the
/// central-difference step (1e-5 suits values of order one).
pub fn gradient_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let forward = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar(loss))
    };

    // Analytic pass.
    let mut g = Graph::<f64>::new().strict_finite();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Array4::zeros(t.raw_dim())))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errs = Vec::with_capacity(inputs.len());
    let mut checked = 0;

    for (ti, input) in inputs.iter().enumerate() {
        let mut num = Array4::zeros(input.raw_dim());
        let len = input.len();
        for flat in 0..len {
            let idx = flat_to_index(input.raw_dim(), flat);
            let orig = work[ti][idx];
            work[ti][idx] = orig + eps;
            let up = forward(&work)?;
            work[ti][idx] = orig - eps;
            let down = forward(&work)?;
            work[ti][idx] = orig;
            num[idx] = (up - down) / (2.0 * eps);
            checked += 1;
        }
        let diff_sq: f64 = num
            .iter()
            .zip(analytic[ti].iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let n_norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a_norm: f64 = analytic[ti].iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = n_norm.max(a_norm).max(1e-12);
        rel_errs.push(diff_sq.sqrt() / denom);
    }

    let max_rel_err = rel_errs.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_errs,
        max_rel_err,
        checked,
    })
}

fn flat_to_index(dim: ndarray::Ix4, flat: usize) -> [usize; 4] {
    let (_, c, h, w) = (dim[0], dim[1], dim[2], dim[3]);
    let x = flat % w;
    let y = (flat / w) % h;
    let ci = (flat / (w * h)) % c;
    let ni = flat / (w * h * c);
    [ni, ci, y, x]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rng_tensor((1, 2, 5, 6), 31);
        let w = rng_tensor((3, 2, 3, 3), 32);
        let b = rng_tensor((1, 3, 1, 1), 33);
        let report = gradient_check(&[x, w, b], 1e-5, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.passes(1e-6), "rel errs {:?}", report.rel_errs);
    }

    #[test]
    fn strided_conv_and_depthwise_gradients_match() {
        let x = rng_tensor((2, 3, 6, 6), 41);
        let w = rng_tensor((4, 3, 4, 4), 42);
        let b = rng_tensor((1, 4, 1, 1), 43);
        let dw = rng_tensor((4, 1, 3, 3), 44);
        let report = gradient_check(&[x, w, b, dw], 1e-5, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let z = g.depthwise(y, ids[3], 1, 1)?;
            let a = g.leaky_relu(z, 0.2);
            let sq = g.mul(a, a)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.passes(1e-6), "rel errs {:?}", report.rel_errs);
    }

    #[test]
    fn warp_resize_and_tv_gradients_match_away_from_kinks() {
        // Flow values chosen well inside the interior with clearly fractional
        // offsets, keeping the sampler away from its piecewise-linear kinks.
        let x = rng_tensor((1, 2, 6, 6), 51);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(52);
        let flow = Array4::from_shape_fn((1, 2, 6, 6), |_| 0.3 + 0.4 * rng.random::<f64>());
        let report = gradient_check(&[x, flow], 1e-6, |g, ids| {
            let up = g.bilinear_resize(ids[0], 6, 6)?;
            let warped = g.grid_warp(up, ids[1])?;
            let l1 = g.abs(warped);
            let tv = g.tv_loss(ids[1]);
            let tv_scaled = g.mul_scalar(tv, 0.3);
            let m = g.mean_all(l1);
            g.add(m, tv_scaled)
        })
        .unwrap();
        assert!(report.passes(1e-5), "rel errs {:?}", report.rel_errs);
    }

    #[test]
    fn activation_and_softmax_gradients_match() {
        let x = rng_tensor((1, 4, 3, 3), 61);
        let t = {
            let mut t = Array4::zeros((1, 4, 3, 3));
            t.index_axis_mut(ndarray::Axis(1), 1).fill(1.0);
            t
        };
        let report = gradient_check(&[x], 1e-5, move |g, ids| {
            let th = g.tanh(ids[0]);
            let sg = g.sigmoid(th);
            let tgt = g.constant(t.clone());
            g.cross_entropy_mean(sg, tgt)
        })
        .unwrap();
        assert!(report.passes(1e-6), "rel errs {:?}", report.rel_errs);
    }

    #[test]
    fn affine_flow_gradients_match() {
        let p = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
            Array4::from_shape_fn((2, 6, 1, 1), |_| 0.05 * (rng.random::<f64>() - 0.5))
        };
        let x = rng_tensor((2, 3, 5, 5), 72);
        let report = gradient_check(&[p, x], 1e-6, |g, ids| {
            let flow = g.affine_flow(ids[0], 5, 5)?;
            let warped = g.grid_warp(ids[1], flow)?;
            let sq = g.mul(warped, warped)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.passes(1e-5), "rel errs {:?}", report.rel_errs);
    }
}
