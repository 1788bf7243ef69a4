//! Named parameter storage, gradient buffers and the on-disk checkpoint format.
//!
//! A checkpoint directory holds `manifest.json` (names, shapes, byte offsets and
//! free-form metadata) next to `params.f32le`, the concatenation of every tensor
//! as little-endian `f32` in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: layer names are fixed at build time.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { values: self.values.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect() }
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.scalar_count() * 4);
        let mut entries = Vec::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            entries.push(ManifestEntry { name: name.clone(), shape: [value.rows(), value.cols()], offset: blob.len() });
            for v in value.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest { format: CHECKPOINT_FORMAT.to_string(), params: entries, metadata };
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&manifest_path, e))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        let blob_path = dir.join("params.f32le");
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }

    /// Loads a checkpoint, returning the store and the manifest metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(&manifest_path, format!("unknown checkpoint format {}", manifest.format)));
        }
        let blob_path = dir.join("params.f32le");
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut store = ParamStore::new();
        for entry in manifest.params {
            let n = entry.shape[0] * entry.shape[1];
            let end = entry.offset + n * 4;
            if end > blob.len() {
                return Err(Error::invalid(&blob_path, format!("tensor {} runs past end of buffer", entry.name)));
            }
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(entry.name, Mat::from_vec(entry.shape[0], entry.shape[1], data));
        }
        Ok((store, manifest.metadata))
    }

    /// Copies values for every name present in both stores; shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(src) = other.by_name(name) else {
                return Err(Error::Config(format!("checkpoint is missing parameter {name}")));
            };
            if src.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?} in checkpoint, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "togkit-params-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Mat, scale: f64) {
        self.values[id.0].add_scaled(g, scale);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|m| m.scale_in_place(s));
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|m| m.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("a.weight", Mat::from_vec(2, 3, vec![0.1, -0.2, 0.3, 1e-3, 5.0, -7.25]));
        store.insert("b.bias", Mat::from_vec(1, 2, vec![0.0, 1.0 / 3.0]));
        store.save(dir.path(), serde_json::json!({"note": "x"})).unwrap();
        let (loaded, meta) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(meta["note"], "x");
        assert_eq!(loaded.len(), 2);
        for id in store.ids() {
            let a = store.get(id);
            let b = loaded.by_name(store.name(id)).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = ParamStore::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest.json"), "{err}");
    }
}
