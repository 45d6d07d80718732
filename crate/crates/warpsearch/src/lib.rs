//! Differentiable garment warping with one-shot neural architecture search.
//!
//! The crate implements a small, CPU-only virtual try-on stack:
//!
//! * [`numerics`]: 4-D tensors, reverse-mode autodiff, convolution, bilinear
//!   sampling, and a finite-difference gradient checker.
//! * [`warp`]: dense flow fields and their algebra (composition, upsampling,
//!   total variation, serialization).
//! * [`search_space`]: genome encodings for the two searchable networks and
//!   uniform sampling over them.
//! * [`supernet_warping`] / [`supernet_fusion`]: weight-sharing supernets for
//!   garment warping and try-on fusion.
//! * [`ppp`]: the pre-processing stage that predicts a partial parsing of the
//!   person and coarsely aligns the garment.
//! * [`evo_search`]: evolutionary search over frozen supernet weights.
//! * [`metrics`]: SSIM, mask IoU, and metric record plumbing.
//! * [`synthdata`]: a procedural garment-deformation benchmark with exact
//!   ground-truth flows.
//!
//! Everything is deterministic given a seed, single-threaded, and exercised
//! end to end by the `acceptance` integration test suite.

pub mod error;
pub mod numerics;
pub mod search_space;
pub mod warp;

pub use error::{Error, Result};
