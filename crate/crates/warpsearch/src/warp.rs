//! Dense flow fields and their algebra.
//!
//! A [`FlowField`] stores one per-pixel backward displacement field as two
//! channels `(dx, dy)` in pixels: warping an image by the field samples the
//! source at `(x + dx, y + dy)`.  The algebra here mirrors the graph-level
//! ops in [`crate::numerics`] for single fields outside any training step:
//! composition, doubling upsampling, total variation, and a small binary
//! serialization format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, grid_warp, Scalar, Tensor};

const FLOW_MAGIC: &[u8; 4] = b"FLO1";

/// Dense backward displacement field over an `(h, w)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Scalar = f32> {
    /// `(2, h, w)`: channel 0 is dx, channel 1 is dy.
    data: Array3<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn from_channels(dx: Array2<T>, dy: Array2<T>) -> Result<Self> {
        if dx.dim() != dy.dim() {
            return Err(Error::Argument {
                op: "FlowField::from_channels",
                message: format!("dx {:?} and dy {:?} disagree", dx.dim(), dy.dim()),
            });
        }
        let (h, w) = dx.dim();
        let mut data = Array3::zeros((2, h, w));
        data.index_axis_mut(Axis(0), 0).assign(&dx);
        data.index_axis_mut(Axis(0), 1).assign(&dy);
        Ok(FlowField { data })
    }

    pub fn from_tensor(data: Array3<T>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::Argument {
                op: "FlowField::from_tensor",
                message: format!("expected 2 channels, got {}", data.dim().0),
            });
        }
        Ok(FlowField { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dx(&self) -> ndarray::ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), 0)
    }

    pub fn dy(&self) -> ndarray::ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), 1)
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.data
    }

    /// View as a batch-1 `(1, 2, h, w)` tensor.
    pub fn as_batch(&self) -> Tensor<T> {
        self.data
            .view()
            .insert_axis(Axis(0))
            .to_owned()
    }

    pub fn from_batch_sample(t: &Tensor<T>, n: usize) -> Self {
        FlowField {
            data: t.index_axis(Axis(0), n).to_owned(),
        }
    }

    /// Warp a `(c, h, w)` image by this field (border-clamped bilinear).
    pub fn apply(&self, image: &Array3<T>) -> Result<Array3<T>> {
        let (_, h, w) = image.dim();
        if (h, w) != (self.height(), self.width()) {
            return Err(Error::Argument {
                op: "FlowField::apply",
                message: format!(
                    "image {h}x{w} does not match flow {}x{}",
                    self.height(),
                    self.width()
                ),
            });
        }
        let x: Tensor<T> = image.view().insert_axis(Axis(0)).to_owned();
        let f = self.as_batch();
        let out = grid_warp(&x, &f);
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Compose an accumulated field with a newly predicted one.
    ///
    /// The result satisfies `warp(img, composed) == warp(warp(img, acc), new)`
    /// up to interpolation error: at every pixel `p`,
    /// `composed(p) = acc(p + new(p)) + new(p)`.
    pub fn compose(accumulated: &Self, new: &Self) -> Result<Self> {
        if (accumulated.height(), accumulated.width()) != (new.height(), new.width()) {
            return Err(Error::Argument {
                op: "FlowField::compose",
                message: format!(
                    "fields {}x{} and {}x{} disagree",
                    accumulated.height(),
                    accumulated.width(),
                    new.height(),
                    new.width()
                ),
            });
        }
        let acc = accumulated.as_batch();
        let nf = new.as_batch();
        let sampled = grid_warp(&acc, &nf);
        let composed = &sampled + &nf;
        Ok(FlowField {
            data: composed.index_axis(Axis(0), 0).to_owned(),
        })
    }

    /// Double the resolution: bilinear-resize the field and double its
    /// values, since displacements are measured in pixels of the new grid.
    pub fn upsample2x(&self) -> Self {
        let two = T::from_f64_lossy(2.0);
        let b = self.as_batch();
        let up = bilinear_resize(&b, self.height() * 2, self.width() * 2);
        FlowField {
            data: up.index_axis(Axis(0), 0).mapv(|v| v * two),
        }
    }

    /// Total variation: sum of absolute forward differences along x and y
    /// over both channels.
    pub fn tv(&self) -> T {
        let b = self.as_batch();
        crate::numerics::tv_of_batch(&b)
    }

    /// Mean total variation per pixel, used to order deformation complexity.
    pub fn mean_tv(&self) -> T {
        self.tv() / T::from_usize(self.height() * self.width()).unwrap()
    }

    fn to_f32_planes(&self) -> (Vec<f32>, Vec<f32>) {
        let dx = self.dx().iter().map(|v| v.to_f64_lossy() as f32).collect();
        let dy = self.dy().iter().map(|v| v.to_f64_lossy() as f32).collect();
        (dx, dy)
    }

    /// Write as `FLO1` + u32 h + u32 w + dx plane + dy plane (f32 LE,
    /// row-major planes).
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing flow {}", path.display());
        let f = File::create(path).map_err(Error::io(ctx()))?;
        let mut wtr = BufWriter::new(f);
        wtr.write_all(FLOW_MAGIC).map_err(Error::io(ctx()))?;
        wtr.write_all(&(self.height() as u32).to_le_bytes())
            .map_err(Error::io(ctx()))?;
        wtr.write_all(&(self.width() as u32).to_le_bytes())
            .map_err(Error::io(ctx()))?;
        let (dx, dy) = self.to_f32_planes();
        for plane in [&dx, &dy] {
            for v in plane {
                wtr.write_all(&v.to_le_bytes()).map_err(Error::io(ctx()))?;
            }
        }
        wtr.flush().map_err(Error::io(ctx()))?;
        Ok(())
    }

    /// Read a field written by [`FlowField::write_to`].
    pub fn read_from(path: &Path) -> Result<FlowField<f32>> {
        let ctx = || format!("reading flow {}", path.display());
        let f = File::open(path).map_err(Error::io(ctx()))?;
        let mut rdr = BufReader::new(f);
        let mut magic = [0u8; 4];
        rdr.read_exact(&mut magic).map_err(Error::io(ctx()))?;
        if &magic != FLOW_MAGIC {
            return Err(Error::Data(format!(
                "{}: bad flow magic {:?}, expected {:?}",
                path.display(),
                magic,
                FLOW_MAGIC
            )));
        }
        let mut buf4 = [0u8; 4];
        rdr.read_exact(&mut buf4).map_err(Error::io(ctx()))?;
        let h = u32::from_le_bytes(buf4) as usize;
        rdr.read_exact(&mut buf4).map_err(Error::io(ctx()))?;
        let w = u32::from_le_bytes(buf4) as usize;
        if h == 0 || w == 0 || h.saturating_mul(w) > 1 << 28 {
            return Err(Error::Data(format!(
                "{}: implausible flow size {h}x{w}",
                path.display()
            )));
        }
        let mut data = Array3::zeros((2, h, w));
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    rdr.read_exact(&mut buf4).map_err(Error::io(ctx()))?;
                    data[[c, y, x]] = f32::from_le_bytes(buf4);
                }
            }
        }
        let mut tail = [0u8; 1];
        match rdr.read(&mut tail) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::Data(format!(
                    "{}: trailing bytes after flow payload",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(ctx())(e)),
        }
        Ok(FlowField { data })
    }
}

/// Upsample a batched `(N, 2, h, w)` flow tensor inside a graph: resize to
/// double resolution and double the values.
pub fn upsample_flow_node<T: Scalar>(
    g: &mut crate::numerics::Graph<T>,
    flow: crate::numerics::TensorId,
) -> Result<crate::numerics::TensorId> {
    let (_, _, h, w) = g.shape(flow);
    let up = g.bilinear_resize(flow, h * 2, w * 2)?;
    Ok(g.mul_scalar(up, T::from_f64_lossy(2.0)))
}

/// Compose batched flow tensors inside a graph: `acc` sampled through `new`,
/// plus `new`.
pub fn compose_flows_node<T: Scalar>(
    g: &mut crate::numerics::Graph<T>,
    accumulated: crate::numerics::TensorId,
    new: crate::numerics::TensorId,
) -> Result<crate::numerics::TensorId> {
    let sampled = g.grid_warp(accumulated, new)?;
    g.add(sampled, new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn uniform_field(h: usize, w: usize, dx: f32, dy: f32) -> FlowField<f32> {
        let mut f = FlowField::zeros(h, w);
        f.data_mut().index_axis_mut(Axis(0), 0).fill(dx);
        f.data_mut().index_axis_mut(Axis(0), 1).fill(dy);
        f
    }

    #[test]
    fn composing_uniform_translations_adds_them() {
        let a = uniform_field(6, 8, 1.25, -0.5);
        let b = uniform_field(6, 8, 0.5, 0.75);
        let c = FlowField::compose(&a, &b).unwrap();
        for v in c.dx().iter() {
            assert!((v - 1.75).abs() < 1e-6, "dx should add: {v}");
        }
        for v in c.dy().iter() {
            assert!((v - 0.25).abs() < 1e-6, "dy should add: {v}");
        }
    }

    #[test]
    fn composed_warp_matches_sequential_warping() {
        // Smooth interior flows keep interpolation error small; the identity
        // warp(img, compose(acc, new)) == warp(warp(img, acc), new) is exact
        // only for flows that are locally linear, so tolerance is loose.
        let (h, w) = (16, 16);
        let img = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            ((x as f32) / w as f32 + (y as f32) / h as f32).sin()
        });
        let smooth = |seed: u64| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ax = r.random::<f32>() * 0.5;
            let ay = r.random::<f32>() * 0.5;
            let mut f = FlowField::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let fx = ax * ((y as f32) / h as f32 * 3.0).sin();
                    let fy = ay * ((x as f32) / w as f32 * 3.0).cos();
                    f.data_mut()[[0, y, x]] = fx;
                    f.data_mut()[[1, y, x]] = fy;
                }
            }
            f
        };
        let acc = smooth(1);
        let new = smooth(2);
        let composed = FlowField::compose(&acc, &new).unwrap();
        let direct = composed.apply(&img).unwrap();
        let sequential = new.apply(&acc.apply(&img).unwrap()).unwrap();
        let mut max_diff = 0.0f32;
        // Interior comparison: border clamping makes edge pixels disagree.
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                max_diff = max_diff.max((direct[[0, y, x]] - sequential[[0, y, x]]).abs());
            }
        }
        assert!(max_diff < 5e-3, "composition mismatch {max_diff}");
    }

    #[test]
    fn upsampling_doubles_size_and_values() {
        let f = uniform_field(4, 6, 0.5, -1.0);
        let up = f.upsample2x();
        assert_eq!((up.height(), up.width()), (8, 12));
        assert!(up.dx().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(up.dy().iter().all(|v| (v + 2.0).abs() < 1e-6));
    }

    #[test]
    fn tv_matches_hand_example_and_scales_with_upsampling() {
        // dx rows [0, 1; 0, 1]: x-diffs sum to 2, dy zero.
        let mut f = FlowField::<f32>::zeros(2, 2);
        f.data_mut()[[0, 0, 1]] = 1.0;
        f.data_mut()[[0, 1, 1]] = 1.0;
        assert_eq!(f.tv(), 2.0);
        assert_eq!(f.mean_tv(), 0.5);
    }

    #[test]
    fn flow_serialization_round_trips_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut f = FlowField::<f32>::zeros(5, 7);
        f.data_mut().mapv_inplace(|_| rng.random::<f32>() * 8.0 - 4.0);
        let dir = std::env::temp_dir().join("warpsearch-flow-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.flo");
        f.write_to(&path).unwrap();
        let back = FlowField::<f32>::read_from(&path).unwrap();
        assert_eq!(f, back, "f32 round trip must be bit-exact");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn flow_reader_rejects_corrupt_headers() {
        let dir = std::env::temp_dir().join("warpsearch-flow-corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let bad_magic = dir.join("bad_magic.flo");
        std::fs::write(&bad_magic, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(FlowField::<f32>::read_from(&bad_magic).is_err());

        let truncated = dir.join("truncated.flo");
        std::fs::write(&truncated, b"FLO1\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00").unwrap();
        assert!(FlowField::<f32>::read_from(&truncated).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
