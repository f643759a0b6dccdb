use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Graph, Result, Tensor, TensorError, Var};

/// Flat named tensor store. Iteration order is lexicographic by name, which
/// fixes the checkpoint layout and the optimizer's visiting order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every tensor on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    /// Rounds every value to the nearest `f32`, making checkpoints lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name; parameters the loss never touched get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
                (k.clone(), grad)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub data_file: String,
    pub tensors: Vec<CheckpointEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "lst-checkpoint-v1";

/// JSON manifest plus one raw file of little-endian `f32` values in manifest order.
pub struct Checkpoint;

impl Checkpoint {
    fn io_err(path: &Path, e: impl std::fmt::Display) -> TensorError {
        TensorError::Config(format!("{}: {e}", path.display()))
    }

    fn data_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    pub fn save<'a>(manifest: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let data_path = Self::data_path(manifest);
        let mut w = BufWriter::new(fs::File::create(&data_path).map_err(|e| Self::io_err(&data_path, e))?);
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in tensors {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())
                    .map_err(|e| Self::io_err(&data_path, e))?;
            }
            entries.push(CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        w.flush().map_err(|e| Self::io_err(&data_path, e))?;
        let m = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            data_file: data_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Self::io_err(manifest, e))?;
        fs::write(manifest, json).map_err(|e| Self::io_err(manifest, e))
    }

    pub fn load(manifest: &Path) -> Result<BTreeMap<String, Tensor>> {
        let text = fs::read_to_string(manifest).map_err(|e| Self::io_err(manifest, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Self::io_err(manifest, e))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Self::io_err(manifest, format!("unsupported format {}", m.format)));
        }
        let data_path = manifest.with_file_name(&m.data_file);
        let mut bytes = Vec::new();
        fs::File::open(&data_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Self::io_err(&data_path, e))?;
        let mut out = BTreeMap::new();
        for e in m.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > bytes.len() {
                return Err(Self::io_err(&data_path, format!("tensor {} truncated", e.name)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            out.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(out)
    }

    pub fn save_store(manifest: &Path, store: &ParamStore) -> Result<()> {
        Self::save(manifest, store.iter().map(|(k, t)| (k.as_str(), t)))
    }

    pub fn load_store(manifest: &Path) -> Result<ParamStore> {
        let tensors = Self::load(manifest)?;
        Ok(ParamStore { tensors })
    }
}
