//! Trainable parameter storage, seeded initialization, SGD, checkpoints.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::GraphSpec;
use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "gprar-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    value: Tensor,
    #[serde(skip)]
    grad: Vec<f64>,
}

/// Named trainable tensors with matching gradient buffers.
///
/// Each entry is initialized from an rng derived from `(rng_seed, name)`, so
/// initialization does not depend on registration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    rng_seed: u64,
    entries: BTreeMap<String, Entry>,
}

impl ModelParams {
    pub fn new(rng_seed: u64) -> Self {
        Self { rng_seed, entries: BTreeMap::new() }
    }

    /// Registers every parameter a graph declares, initializing weights
    /// uniformly in [-s, s] with s = sqrt(6 / (fan_in + fan_out)).
    /// Entries named `*.b` (biases) start at zero. Re-registration of an
    /// existing name with the same shape is a no-op.
    pub fn register_graph(&mut self, spec: &GraphSpec) -> Result<()> {
        for decl in spec.param_decls() {
            if let Some(existing) = self.entries.get(&decl.name) {
                if existing.value.shape() != decl.shape.as_slice() {
                    return Err(Error::Graph(format!(
                        "parameter '{}' re-declared with shape {:?}, have {:?}",
                        decl.name,
                        decl.shape,
                        existing.value.shape()
                    )));
                }
                continue;
            }
            let value = if decl.name.ends_with(".b") {
                Tensor::zeros(&decl.shape)
            } else {
                init_uniform(self.rng_seed, &decl.name, &decl.shape, decl.fan_in, decl.fan_out)
            };
            let n = value.numel();
            self.entries.insert(decl.name.clone(), Entry { value, grad: vec![0.0; n] });
        }
        Ok(())
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Graph(format!("unknown parameter '{name}'")))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_slice())
            .ok_or_else(|| Error::Graph(format!("unknown parameter '{name}'")))
    }

    /// Overwrites an entry's value; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter '{name}'")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter '{name}' has shape {:?}, assigned {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Zeroes gradients of entries whose name starts with `prefix`.
    pub fn zero_grads_with_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Vec<f64>>, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter '{name}'")))?;
            if entry.grad.len() != g.len() {
                return Err(Error::ShapeMismatch(format!("gradient size mismatch for '{name}'")));
            }
            for (dst, src) in entry.grad.iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
        Ok(())
    }

    /// value <- value - lr * grad for every entry, then zeroes gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        for e in self.entries.values_mut() {
            for (v, g) in e.value.values_mut().iter_mut().zip(e.grad.iter_mut()) {
                *v -= lr * *g;
                *g = 0.0;
            }
        }
    }

    /// Copies shape-matching entries from `other` by name. Entries of `self`
    /// missing from `other`, or with differing shapes, are left as they are
    /// and reported. Entries whose name passes `allow_mismatch` may mismatch
    /// silently; any other mismatch is an error.
    pub fn copy_matching(
        &mut self,
        other: &ModelParams,
        allow_mismatch: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut skipped = Vec::new();
        for (name, entry) in self.entries.iter_mut() {
            match other.entries.get(name) {
                Some(src) if src.value.shape() == entry.value.shape() => {
                    entry.value = src.value.clone();
                }
                Some(src) => {
                    if !allow_mismatch(name) {
                        return Err(Error::Checkpoint(format!(
                            "parameter '{name}' has shape {:?} in checkpoint, need {:?}",
                            src.value.shape(),
                            entry.value.shape()
                        )));
                    }
                    skipped.push(name.clone());
                }
                None => {
                    if !allow_mismatch(name) {
                        return Err(Error::Checkpoint(format!("checkpoint lacks parameter '{name}'")));
                    }
                    skipped.push(name.clone());
                }
            }
        }
        Ok(skipped)
    }

    pub fn iter_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }
}

/// Deterministic per-entry rng: FNV-1a of the name mixed into the seed, then
/// splitmix64 so nearby seeds decorrelate.
fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn init_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = entry_rng(seed, name);
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values = (0..numel).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), values).expect("init shape")
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: String,
    rng_seed: u64,
    entries: BTreeMap<String, CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Writes a self-describing JSON checkpoint (entry name -> shape -> values).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let entries = params
        .entries
        .iter()
        .map(|(n, e)| {
            (n.clone(), CheckpointEntry {
                shape: e.value.shape().to_vec(),
                values: e.value.values().to_vec(),
            })
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION.to_string(),
        rng_seed: params.rng_seed,
        entries,
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(BufWriter::new(f), &file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version '{}'",
            file.format_version
        )));
    }
    let mut params = ModelParams::new(file.rng_seed);
    for (name, entry) in file.entries {
        let value = Tensor::new(entry.shape, entry.values)
            .map_err(|e| Error::Checkpoint(format!("entry '{name}': {e}")))?;
        let n = value.numel();
        params.entries.insert(name, Entry { value, grad: vec![0.0; n] });
    }
    Ok(params)
}
