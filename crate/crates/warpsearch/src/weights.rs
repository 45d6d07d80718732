//! Named parameter storage, the Adam optimizer, and the checkpoint format.
//!
//! Supernets keep every candidate operation's parameters in one
//! [`WeightStore`] keyed by hierarchical names (`warp/cell2/block1/op3/w`).
//! A training step leases the sampled path's tensors into a fresh graph
//! through a [`Binding`], runs backward, and hands the name-keyed gradients
//! to [`Adam::step`].  Adam state is lazy: moments and step counts exist
//! only for parameters that have received a gradient, so updating one
//! sampled path never touches any other path's weights or statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;
use rand::SeedableRng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, TensorId};

const CHECKPOINT_MAGIC: &[u8; 4] = b"WSWT";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-normal for conv weights: std = sqrt(2 / fan_in).
    HeNormal,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// All zeros (biases, flow-residual heads).
    Zeros,
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct WeightStore<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            params: BTreeMap::new(),
        }
    }

    /// Create a parameter with a deterministic per-name RNG stream, so the
    /// initialized values depend only on `(global_seed, name, shape, init)`
    /// and never on creation order.
    pub fn create(
        &mut self,
        name: &str,
        shape: (usize, usize, usize, usize),
        init: Init,
        global_seed: u64,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Argument {
                op: "WeightStore::create",
                message: format!("parameter {name:?} already exists"),
            });
        }
        let tensor = match init {
            Init::Zeros => Array4::zeros(shape),
            Init::HeNormal => {
                let fan_in = shape.1 * shape.2 * shape.3;
                let std = (2.0 / fan_in as f64).sqrt();
                self.sample_normal(name, shape, std, global_seed)
            }
            Init::Normal(std) => self.sample_normal(name, shape, std, global_seed),
        };
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    fn sample_normal(
        &self,
        name: &str,
        shape: (usize, usize, usize, usize),
        std: f64,
        global_seed: u64,
    ) -> Tensor<T> {
        let seed = global_seed ^ fnv1a64(name);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0f64, std).expect("std is finite");
        Array4::from_shape_simple_fn(shape, || T::from_f64_lossy(normal.sample(&mut rng)))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Argument {
            op: "WeightStore::get",
            message: format!("unknown parameter {name:?}"),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Argument {
            op: "WeightStore::get_mut",
            message: format!("unknown parameter {name:?}"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Convert every tensor (used to build `f64` stores for gradient checks).
    pub fn map_dtype<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|e| U::from_f64_lossy(e.to_f64_lossy()))))
                .collect(),
        }
    }
}

impl WeightStore<f32> {
    /// Serialize as `WSWT` + version + count + (name, shape, f32 payload)*,
    /// entries in name order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing checkpoint {}", path.display());
        let f = File::create(path).map_err(Error::io(ctx()))?;
        let mut w = BufWriter::new(f);
        w.write_all(CHECKPOINT_MAGIC).map_err(Error::io(ctx()))?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())
            .map_err(Error::io(ctx()))?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())
            .map_err(Error::io(ctx()))?;
        for (name, tensor) in &self.params {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Argument {
                    op: "WeightStore::save",
                    message: format!("parameter name too long: {name:?}"),
                });
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())
                .map_err(Error::io(ctx()))?;
            w.write_all(bytes).map_err(Error::io(ctx()))?;
            let dim = tensor.dim();
            for d in [dim.0, dim.1, dim.2, dim.3] {
                w.write_all(&(d as u32).to_le_bytes()).map_err(Error::io(ctx()))?;
            }
            for v in tensor.iter() {
                w.write_all(&v.to_le_bytes()).map_err(Error::io(ctx()))?;
            }
        }
        w.flush().map_err(Error::io(ctx()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let f = File::open(path).map_err(|e| err(format!("open failed: {e}")))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| err(format!("short header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(err(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| err(format!("short header: {e}")))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        r.read_exact(&mut b4).map_err(|e| err(format!("short header: {e}")))?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut params = BTreeMap::new();
        for i in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)
                .map_err(|e| err(format!("entry {i}: short name length: {e}")))?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|e| err(format!("entry {i}: short name: {e}")))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| err(format!("entry {i}: name is not UTF-8")))?;
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                r.read_exact(&mut b4)
                    .map_err(|e| err(format!("entry {name:?}: short shape: {e}")))?;
                *d = u32::from_le_bytes(b4) as usize;
            }
            let len: usize = shape.iter().product();
            if len > 1 << 28 {
                return Err(err(format!("entry {name:?}: implausible size {shape:?}")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b4)
                    .map_err(|e| err(format!("entry {name:?}: short payload: {e}")))?;
                data.push(f32::from_le_bytes(b4));
            }
            let tensor = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)
                .expect("length matches shape by construction");
            if params.insert(name.clone(), tensor).is_some() {
                return Err(err(format!("duplicate parameter {name:?}")));
            }
        }
        let mut tail = [0u8; 1];
        match r.read(&mut tail) {
            Ok(0) => {}
            Ok(_) => return Err(err("trailing bytes after last entry".to_string())),
            Err(e) => return Err(err(format!("read failed: {e}"))),
        }
        Ok(WeightStore { params })
    }
}

/// Leases store parameters into a graph, one node per distinct name, and
/// collects their gradients back out after the backward pass.
pub struct Binding {
    ids: BTreeMap<String, TensorId>,
}

impl Default for Binding {
    fn default() -> Self {
        Self::new()
    }
}

impl Binding {
    pub fn new() -> Self {
        Binding {
            ids: BTreeMap::new(),
        }
    }

    /// Lease `name` into the graph as a trainable leaf.  Repeated leases of
    /// the same name return the same node, so shared weights accumulate
    /// gradients from every use site.
    pub fn lease<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &WeightStore<T>,
        name: &str,
    ) -> Result<TensorId> {
        if let Some(id) = self.ids.get(name) {
            return Ok(*id);
        }
        let id = g.input(store.get(name)?.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn leased_names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }

    /// Pull gradients for every leased parameter that received one.
    pub fn collect<T: Scalar>(
        &self,
        grads: &mut crate::numerics::Grads<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            if let Some(g) = grads.take(*id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Adam with per-parameter lazy state.
///
/// Step counts, first and second moments exist per parameter and advance
/// only when that parameter receives a gradient, which keeps bias
/// correction and moment decay local to the sampled path.  Restarting
/// training from a checkpoint restarts moments from zero; only weights are
/// persisted.
pub struct Adam<T: Scalar = f32> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: BTreeMap<String, u32>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr: T::from_f64_lossy(lr),
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            eps: T::from_f64_lossy(1e-8),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Apply one update for every gradient in `grads`.
    pub fn step(
        &mut self,
        store: &mut WeightStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let one = T::one();
        for (name, g) in grads {
            let w = store.get_mut(name)?;
            if w.dim() != g.dim() {
                return Err(Error::Argument {
                    op: "Adam::step",
                    message: format!(
                        "gradient shape {:?} does not match parameter {name:?} {:?}",
                        g.dim(),
                        w.dim()
                    ),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array4::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array4::zeros(g.raw_dim()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = one - self.beta1.powi(*t as i32);
            let bc2 = one - self.beta2.powi(*t as i32);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }

    /// Parameters that have received at least one update.
    pub fn touched(&self) -> impl Iterator<Item = &str> {
        self.t.keys().map(String::as_str)
    }
}
