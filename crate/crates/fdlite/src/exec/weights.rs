//! Weight container: named f32 tensors plus the on-disk `.fdw` format.
//!
//! Layout: a little-endian u64 byte length, the UTF-8 JSON manifest, then
//! the raw little-endian f32 blobs back to back in manifest order. The
//! manifest records name/shape/offset/length per entry and a SHA-256 of the
//! whole blob section.

use super::{ExecError, TensorBuf};
use crate::graph::{LayerGraph, LayerKind, TensorShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Ordered collection of named tensors. Order is preserved through
/// save/load, which keeps container round-trips byte-identical.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    entries: Vec<(String, TensorBuf)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: TensorBuf) {
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorBuf> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorBuf> {
        let i = self.index.remove(name)?;
        let (_, tensor) = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorBuf)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut TensorBuf)> {
        self.entries.iter_mut().map(|(n, t)| (&*n, t))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entries: Vec<ManifestEntry>,
    blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: u64,
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<(), ExecError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let offset = blob.len() as u64;
        for v in &tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let s = tensor.shape;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: [s.n, s.h, s.w, s.c],
            offset,
            len: tensor.data.len() as u64,
        });
    }
    let manifest = Manifest {
        version: 1,
        entries,
        blob_sha256: hex_digest(&blob),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| ExecError::Format(e.to_string()))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightStore, ExecError> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| ExecError::Format("truncated header".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| ExecError::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| ExecError::Format(format!("bad manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(ExecError::Format(format!(
            "unsupported container version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if hex_digest(&blob) != manifest.blob_sha256 {
        return Err(ExecError::Format("blob checksum mismatch".into()));
    }

    let mut store = WeightStore::new();
    for entry in manifest.entries {
        let [n, h, w, c] = entry.shape;
        let shape = TensorShape::new(n, h, w, c);
        if shape.elements() as u64 != entry.len {
            return Err(ExecError::Format(format!(
                "entry '{}': shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        let bytes = blob.get(start..end).ok_or_else(|| {
            ExecError::Format(format!("entry '{}': blob out of range", entry.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(entry.name, TensorBuf::new(shape, data));
    }
    Ok(store)
}

/// Check a store against a graph: every conv/batch-norm node must have its
/// entries at matching shapes. Extra entries are returned as orphan warnings.
pub fn validate_weights(graph: &LayerGraph, store: &WeightStore) -> Result<Vec<String>, ExecError> {
    let mut used: HashMap<&str, ()> = HashMap::new();
    for node in graph.nodes() {
        for (suffix, shape) in expected_entries(node) {
            let name = format!("{}.{}", node.weight_key, suffix);
            match store.get(&name) {
                None => {
                    return Err(ExecError::MissingWeight {
                        node: node.name.clone(),
                        name,
                    })
                }
                Some(tensor) if tensor.shape != shape => {
                    return Err(ExecError::Format(format!(
                        "entry '{name}': shape {} does not match node {}",
                        tensor.shape, shape
                    )));
                }
                Some(_) => {}
            }
            if let Some((key, _)) = store.index.get_key_value(name.as_str()) {
                used.insert(key.as_str(), ());
            }
        }
    }
    Ok(store
        .iter()
        .filter(|(name, _)| !used.contains_key(name.as_str()))
        .map(|(name, _)| name.clone())
        .collect())
}

fn expected_entries(node: &crate::graph::LayerSpec) -> Vec<(&'static str, TensorShape)> {
    match node.kind {
        LayerKind::Conv => {
            let kernel = TensorShape::new(
                node.out_channels,
                node.kernel_h,
                node.kernel_w,
                node.in_channels / node.groups,
            );
            let mut entries = vec![("weight", kernel)];
            if node.has_bias {
                entries.push(("bias", TensorShape::new(1, 1, 1, node.out_channels)));
            }
            entries
        }
        LayerKind::BatchNorm => {
            let vector = TensorShape::new(1, 1, 1, node.out_channels);
            vec![
                ("scale", vector),
                ("shift", vector),
                ("mean", vector),
                ("var", vector),
            ]
        }
        _ => Vec::new(),
    }
}

/// Deterministic initialization: conv weights uniform in
/// +/- sqrt(6/(fan_in + fan_out)), conv biases zero, batch-norm at identity
/// (scale 1, shift 0, running mean 0, running var 1).
pub fn init_weights(graph: &LayerGraph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for node in graph.nodes() {
        if store.get(&format!("{}.weight", node.weight_key)).is_some()
            || store.get(&format!("{}.scale", node.weight_key)).is_some()
        {
            continue; // shared key already filled
        }
        match node.kind {
            LayerKind::Conv => {
                let icg = node.in_channels / node.groups;
                let receptive = node.kernel_h * node.kernel_w;
                let fan_in = (icg * receptive) as f64;
                let fan_out = (node.out_channels * receptive) as f64;
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                let shape = TensorShape::new(node.out_channels, node.kernel_h, node.kernel_w, icg);
                let data = (0..shape.elements())
                    .map(|_| rng.gen_range(-bound..=bound) as f32)
                    .collect();
                store.insert(
                    format!("{}.weight", node.weight_key),
                    TensorBuf::new(shape, data),
                );
                if node.has_bias {
                    store.insert(
                        format!("{}.bias", node.weight_key),
                        TensorBuf::zeros(TensorShape::new(1, 1, 1, node.out_channels)),
                    );
                }
            }
            LayerKind::BatchNorm => {
                let shape = TensorShape::new(1, 1, 1, node.out_channels);
                for (suffix, value) in [("scale", 1.0), ("shift", 0.0), ("mean", 0.0), ("var", 1.0)]
                {
                    store.insert(
                        format!("{}.{}", node.weight_key, suffix),
                        TensorBuf::new(shape, vec![value; node.out_channels]),
                    );
                }
            }
            _ => {}
        }
    }
    store
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
