//! Differentiable numerics substrate.
//!
//! A fixed menu of layers with hand-coded backward passes, a named parameter
//! store with paired gradient buffers, Adam, and a finite-difference gradient
//! checker. No autodiff: every backward is written out and verified against
//! central differences.

mod blocks;
mod gradcheck;
mod layers;

pub use blocks::{
    sinusoidal_positions, CrossAttnBlock, CrossBlockCache, SelfAttnBlock, SelfBlockCache,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    cross_entropy_from_logits, gelu as gelu_scalar, log_softmax_rows as log_softmax_pair,
    AttnMask, Layer, LayerCache, LayerGrad, LayerInput, XentOptions,
};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// The layer menu. Attention layers require `model_dim % heads == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        d_in: usize,
        d_out: usize,
    },
    Embedding {
        vocab: usize,
        dim: usize,
        /// Multiplier applied to table rows at use; tables initialize at
        /// sigma 0.02, so 50.0 yields unit-scale activations.
        #[serde(default = "default_emb_scale")]
        scale: f64,
    },
    LayerNorm {
        dim: usize,
    },
    MultiHeadAttention {
        model_dim: usize,
        heads: usize,
        causal: bool,
    },
    CrossAttention {
        model_dim: usize,
        memory_dim: usize,
        heads: usize,
    },
    Gelu,
    SoftmaxXent {
        classes: usize,
    },
}

fn default_emb_scale() -> f64 {
    1.0
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::MultiHeadAttention {
                model_dim, heads, ..
            }
            | LayerSpec::CrossAttention {
                model_dim, heads, ..
            } => {
                if heads == 0 || model_dim % heads != 0 {
                    return Err(Error::Config(format!(
                        "model_dim {model_dim} not divisible by head_count {heads}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor2D,
    grad: Tensor2D,
    adam_m: Tensor2D,
    adam_v: Tensor2D,
}

/// Named parameters with paired gradient buffers and Adam state.
///
/// Single-writer during training; freezing a name blocks gradient
/// accumulation into it so frozen parameters provably hold zero gradient.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    frozen: BTreeSet<String>,
    step: u64,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
            step: 0,
            rng_seed,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor2D) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor2D::zeros(r, c),
                adam_m: Tensor2D::zeros(r, c),
                adam_v: Tensor2D::zeros(r, c),
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor2D {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor2D {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor2D {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.value.rows() * e.value.cols())
            .sum()
    }

    /// Accumulate (+=) into a parameter's gradient buffer. Accumulation into
    /// frozen parameters is dropped so their buffers stay exactly zero.
    pub fn accum_grad(&mut self, name: &str, grad: &Tensor2D) {
        if self.frozen.contains(name) {
            return;
        }
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        entry.grad.add_assign(grad);
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        for n in names {
            self.frozen.insert(n);
        }
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|n| !n.starts_with(prefix));
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Standard Adam with bias correction. Gradient buffers are zeroed and
    /// the step counter incremented. Frozen parameters are untouched.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for (name, entry) in self.entries.iter() {
            if !self.frozen.contains(name) && !entry.grad.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (name, entry) in self.entries.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = entry.grad.data();
            let m = entry.adam_m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.iter()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = entry.adam_v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let value = entry.value.data_mut();
            for i in 0..value.len() {
                let m_hat = entry.adam_m.data()[i] / bc1;
                let v_hat = entry.adam_v.data()[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            entry.grad.fill(0.0);
        }
        Ok(())
    }

    /// FNV-1a over parameter names and f64 bit patterns, in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, entry) in &self.entries {
            eat(name.as_bytes());
            for &v in entry.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checksum restricted to names under a prefix (frozen-LM audits).
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, entry) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &v in entry.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Xavier-uniform init for projection weights.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2D::from_fn(rows, cols, |_, _| rng.uniform_in(-limit, limit))
}

/// N(0, 0.02) init for embedding tables.
pub fn embedding_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.gaussian() * 0.02)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DYSC";
const CHECKPOINT_VERSION: u32 = 1;

/// Write parameters as "DYSC" + version + (name, rows, cols, f32 payload)
/// records, plus a JSON sidecar (`<path>.json`) describing the layer graph
/// and config hash. Adam state is not persisted.
pub fn save_checkpoint(
    store: &ParamStore,
    path: &Path,
    sidecar: &serde_json::Value,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, entry) in &store.entries {
            let bytes = name.as_bytes();
            f.write_all(&(bytes.len() as u32).to_le_bytes())?;
            f.write_all(bytes)?;
            f.write_all(&(entry.value.rows() as u32).to_le_bytes())?;
            f.write_all(&(entry.value.cols() as u32).to_le_bytes())?;
            for &v in entry.value.data() {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    let side_tmp = path.with_extension("json.tmp");
    std::fs::write(&side_tmp, serde_json::to_string_pretty(sidecar).unwrap())?;
    std::fs::rename(&side_tmp, sidecar_path(path))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut store = ParamStore::new(0);
    loop {
        match f.read_exact(&mut u32buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        f.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut f32buf = [0u8; 4];
        for _ in 0..rows * cols {
            f.read_exact(&mut f32buf)?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        store.add(&name, Tensor2D::from_vec(rows, cols, data));
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?).map_err(|e| {
            Error::Parse {
                path: sidecar_path(path).display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        })?;
    Ok((store, sidecar))
}
