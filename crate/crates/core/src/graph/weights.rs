use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::error::{Error, Result};

/// Index of a weight blob: tensor names, shapes and byte ranges.
///
/// ```toml
/// blob = "model.bin"
///
/// [[tensor]]
/// name = "c1.weight"
/// shape = [8, 2, 3, 3]
/// offset = 0
/// length = 576
/// ```
///
/// The blob is raw little-endian f32. Its path is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub blob: String,
    #[serde(rename = "tensor", default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length; `4 * product(shape)`.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Arc<[f32]>,
}

/// Immutable named tensors. Clones share the underlying buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, WeightTensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: format!("weight `{name}`"),
                expected,
                found: data.len(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateWeight(name));
        }
        self.tensors.insert(
            name,
            WeightTensor {
                shape,
                data: data.into(),
            },
        );
        Ok(())
    }

    /// Replaces the data of an existing tensor, keeping its shape.
    pub fn replace(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.into()))?;
        if data.len() != t.data.len() {
            return Err(Error::DimensionMismatch {
                context: format!("weight `{name}`"),
                expected: t.data.len(),
                found: data.len(),
            });
        }
        t.data = data.into();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// He-uniform weights and small uniform biases for every slot of `spec`.
    ///
    /// Each tensor is drawn from its own stream keyed by `seed` and the
    /// tensor name, so two models sharing a layer name get identical values.
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for slot in spec.weight_slots()? {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(slot.name.as_bytes()));
            let n: usize = slot.shape.iter().product();
            let bound = if slot.is_bias {
                1.0 / (slot.fan_in as f32).sqrt()
            } else {
                (6.0 / slot.fan_in as f32).sqrt()
            };
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(slot.name, slot.shape, data)?;
        }
        Ok(store)
    }

    /// Reads a manifest and its blob.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: WeightManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
        let blob_path = blob_path(manifest_path, &manifest.blob);
        let blob = std::fs::read(&blob_path)?;
        Self::from_manifest(&manifest, &blob, &blob_path)
    }

    pub fn from_manifest(manifest: &WeightManifest, blob: &[u8], blob_path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count as u64 {
                return Err(Error::Format {
                    path: blob_path.to_path_buf(),
                    offset: e.offset,
                    msg: format!("tensor `{}` length {} does not match shape {:?}", e.name, e.length, e.shape),
                });
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(Error::Format {
                    path: blob_path.to_path_buf(),
                    offset: e.offset,
                    msg: format!("tensor `{}` runs past the end of a {}-byte blob", e.name, blob.len()),
                });
            };
            let bytes = &blob[e.offset as usize..end as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(e.name.clone(), e.shape.clone(), data)?;
        }
        Ok(store)
    }

    /// Writes `manifest_path` and a sibling `.bin` blob.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_name = manifest_path
            .with_extension("bin")
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("bad manifest path {}", manifest_path.display())))?;
        let mut blob = Vec::with_capacity(4 * self.parameter_count());
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = WeightManifest { blob: blob_name, tensors };
        std::fs::write(blob_path(manifest_path, &manifest.blob), blob)?;
        std::fs::write(
            manifest_path,
            toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(())
    }
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(blob),
        None => PathBuf::from(blob),
    }
}
