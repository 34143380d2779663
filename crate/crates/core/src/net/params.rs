//! Named parameter tensors, AdamW and the checkpoint format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic   8 bytes  "CASCKPT\0"
//! version u32      CHECKPOINT_VERSION
//! meta    u32 length + UTF-8 JSON (model configuration)
//! count   u32
//! per tensor:
//!   name  u32 length + UTF-8
//!   rank  u32, then rank × u64 dimensions
//!   data  product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Parameter initialisation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal(f64),
}

impl ParamSet {
    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> usize {
        let len = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Normal(std) => (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        self.tensors.len() - 1
    }

    #[inline]
    pub fn get(&self, id: usize) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Copies tensor data from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                other.tensors.len(),
                self.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.zero_grads().0,
            v: params.zero_grads().0,
        }
    }

    /// Decoupled-weight-decay Adam update. Non-finite gradients abort the
    /// step before any parameter changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        self.step_with_lr(params, grads, self.cfg.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
        for (t, g) in params.tensors.iter().zip(&grads.0) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(t.name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((t, g), m), v) in params.tensors.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                t.data[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * t.data[i]);
            }
        }
        Ok(())
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r).map_err(|e| Error::invalid(e.to_string()))? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_checkpoint(w: &mut impl Write, meta: &str, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u32(w, meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    write_u32(w, params.tensors.len() as u32)?;
    for t in &params.tensors {
        write_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        write_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns the metadata string and tensors.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, ParamSet)> {
    let io = |e: std::io::Error| Error::invalid(format!("truncated checkpoint: {e}"));
    let mut magic = [0; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::invalid("not a checkpoint file"));
    }
    let version = read_u32(r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta = read_string(r)?;
    let count = read_u32(r).map_err(io)?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let name = read_string(r)?;
        let rank = read_u32(r).map_err(io)?;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(read_u64(r).map_err(io)?));
        }
        params.tensors.push(Tensor { name, shape, data });
    }
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, meta: &str, params: &ParamSet) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, meta, params)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamSet)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(f))
}
