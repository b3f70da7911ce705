//! Named parameter storage, lazy creation during a forward pass, and the
//! checkpoint file format.
//!
//! Checkpoint layout: the magic `MOTSEGCK`, a `u32` format version, a `u64`
//! header length, a JSON header listing every tensor, then the tensor data
//! as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use motseg_autograd::{BnObservation, Graph, Tensor, Var, BN_MOMENTUM};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOTSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Folds the batch statistics observed in a training graph into the
    /// running estimates. Several observations under one key (a layer
    /// applied at several time steps) are averaged first.
    pub fn update_running_stats(&mut self, observations: &[BnObservation]) {
        let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for o in observations {
            let e = grouped
                .entry(o.key.as_str())
                .or_insert_with(|| (vec![0.0; o.mean.len()], vec![0.0; o.var.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&o.mean) {
                *a += b;
            }
            for (a, b) in e.1.iter_mut().zip(&o.var) {
                *a += b;
            }
            e.2 += 1;
        }
        for (key, (mean, var, n)) in grouped {
            for (suffix, obs) in [("running_mean", mean), ("running_var", var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{key}.{suffix}")) {
                    for (r, o) in buf.data_mut().iter_mut().zip(obs) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o / n as f64;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    /// Transposed-convolution weight `[c, c, k, k]` that upsamples each
    /// channel bilinearly.
    Bilinear,
    /// He-normal weight for `base` input channels, tiled `shape[1] / base`
    /// times along the input axis and divided by the tile count.
    Replicated { base: usize },
    /// Zeros except entries `[from, to)` set to `value`.
    Segment { from: usize, to: usize, value: f64 },
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// 1-D bilinear interpolation weights for a kernel of size `k`.
pub fn bilinear_kernel_1d(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2);
    let center = if k % 2 == 1 { factor as f64 - 1.0 } else { factor as f64 - 0.5 };
    (0..k).map(|i| 1.0 - (i as f64 - center).abs() / factor as f64).collect()
}

/// Tiles a first-layer weight `[c_out, c, k, k]` to `[c_out, c * times, k, k]`
/// and divides by `times`, so an input that repeats the same `c` channels
/// `times` times produces the original response.
pub fn replicate_first_layer(w: &Tensor, times: usize) -> Result<Tensor> {
    let (c_out, c, kh, kw) = w.dims4()?;
    if times == 0 {
        return Err(Error::Argument("replication count must be positive".into()));
    }
    let plane = kh * kw;
    let mut out = Vec::with_capacity(w.len() * times);
    for o in 0..c_out {
        let row = &w.data()[o * c * plane..(o + 1) * c * plane];
        for _ in 0..times {
            out.extend(row.iter().map(|v| v / times as f64));
        }
    }
    Ok(Tensor::new(&[c_out, c * times, kh, kw], out)?)
}

fn initialize(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::HeNormal => normal_tensor(shape, (2.0 / fan_in(shape) as f64).sqrt(), rng),
        Init::Scaled(gain) => normal_tensor(shape, gain / (fan_in(shape) as f64).sqrt(), rng),
        Init::Bilinear => {
            let (ci, co, kh, kw) = Tensor::zeros(shape).dims4()?;
            let (fy, fx) = (bilinear_kernel_1d(kh), bilinear_kernel_1d(kw));
            let mut t = Tensor::zeros(shape);
            for c in 0..ci.min(co) {
                for y in 0..kh {
                    for x in 0..kw {
                        t.data_mut()[((c * co + c) * kh + y) * kw + x] = fy[y] * fx[x];
                    }
                }
            }
            t
        }
        Init::Replicated { base } => {
            if shape.len() != 4 || base == 0 || !shape[1].is_multiple_of(base) {
                return Err(Error::Argument(format!("cannot replicate {base} channels into {shape:?}")));
            }
            let base_shape = [shape[0], base, shape[2], shape[3]];
            let w = normal_tensor(&base_shape, (2.0 / fan_in(&base_shape) as f64).sqrt(), rng);
            replicate_first_layer(&w, shape[1] / base)?
        }
        Init::Segment { from, to, value } => {
            let mut t = Tensor::zeros(shape);
            for v in &mut t.data_mut()[from..to] {
                *v = value;
            }
            t
        }
    })
}

enum Access<'a> {
    Read(&'a ParamStore),
    Create(&'a mut ParamStore, &'a mut ChaCha8Rng),
}

/// A graph under construction plus the parameters it reads from. In create
/// mode, parameters missing from the store are initialized on first use.
pub struct Ctx<'a> {
    pub g: Graph,
    access: Access<'a>,
}

impl<'a> Ctx<'a> {
    pub fn read(store: &'a ParamStore, training: bool) -> Self {
        Self { g: Graph::new(training), access: Access::Read(store) }
    }

    pub fn create(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { g: Graph::new(false), access: Access::Create(store, rng) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let t = match &mut self.access {
            Access::Read(store) => store
                .params
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?,
            Access::Create(store, rng) => {
                if !store.params.contains_key(name) {
                    let t = initialize(shape, init, rng)?;
                    store.params.insert(name.to_string(), t);
                }
                &store.params[name]
            }
        };
        if t.shape() != shape {
            return Err(Error::Integrity(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(self.g.param(name, t))
    }

    pub fn buffer(&mut self, name: &str, len: usize, fill: f64) -> Result<Vec<f64>> {
        let t = match &mut self.access {
            Access::Read(store) => store
                .buffers
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing buffer {name}")))?,
            Access::Create(store, _) => store
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| Tensor::full(&[len], fill)),
        };
        if t.len() != len {
            return Err(Error::Integrity(format!("buffer {name} has {} entries, expected {len}", t.len())));
        }
        Ok(t.data().to_vec())
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match &mut self.access {
            Access::Create(_, rng) => Some(rng),
            Access::Read(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<Entry>,
}

/// Serializes `store` with arbitrary JSON metadata.
pub fn write_checkpoint<M: Serialize>(path: &Path, meta: &M, store: &ParamStore) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, t) in &store.params {
        tensors.push(Entry { name: name.clone(), buffer: false, shape: t.shape().to_vec() });
    }
    for (name, t) in &store.buffers {
        tensors.push(Entry { name: name.clone(), buffer: true, shape: t.shape().to_vec() });
    }
    let header = serde_json::to_vec(&Header { meta, tensors }).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in store.params.values().chain(store.buffers.values()) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<(M, ParamStore)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header<M> = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut offset = 20 + hlen;
    let mut store = ParamStore::default();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(format!("truncated data for {}", e.name)))?;
        offset += n * 8;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&e.shape, data)?;
        if e.buffer {
            store.buffers.insert(e.name, t);
        } else {
            store.params.insert(e.name, t);
        }
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header.meta, store))
}
