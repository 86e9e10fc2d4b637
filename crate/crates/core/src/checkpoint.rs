//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! The manifest lists `{name, shape, dtype, offset, length}` per tensor;
//! `weights.bin` holds the little-endian `f32` payloads concatenated in
//! manifest order. Offsets and lengths are in bytes. Values round-trip
//! bit-exactly, NaN payloads included.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::{ParamError, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid checkpoint entry '{name}': {reason}")]
    Entry { name: String, reason: String },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("cannot checkpoint a shape-only model")]
    Meta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Encodes named tensors into `(manifest json, weights blob)`.
pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<(String, Vec<u8>), CheckpointError> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if t.is_meta() {
            return Err(CheckpointError::Meta);
        }
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_string_pretty(&CheckpointManifest { entries })?;
    Ok((manifest, blob))
}

/// Decodes and validates a manifest/blob pair. Untrusted input is fine:
/// every size is checked before any allocation proportional to it.
pub fn decode(manifest: &[u8], weights: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let manifest: CheckpointManifest = serde_json::from_slice(manifest)?;
    let mut seen = HashSet::new();
    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(manifest.entries.len().min(4096));
    for e in manifest.entries {
        let bad = |reason: String| CheckpointError::Entry { name: e.name.clone(), reason };
        if !seen.insert(e.name.clone()) {
            return Err(bad("duplicate name".into()));
        }
        if e.dtype != "f32" {
            return Err(bad(format!("unsupported dtype '{}'", e.dtype)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad("shape overflows".into()))?;
        if numel.checked_mul(4) != Some(e.length) {
            return Err(bad(format!("length {} does not match shape {:?}", e.length, e.shape)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("offset {} breaks manifest order (expected {expected_offset})", e.offset)));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| bad("range overflows".into()))?;
        if end > weights.len() as u64 {
            return Err(bad(format!("range ends at {end}, blob has {} bytes", weights.len())));
        }
        let bytes = &weights[e.offset as usize..end as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| bad(err.to_string()))?;
        expected_offset = end;
        out.push((e.name, t));
    }
    if expected_offset != weights.len() as u64 {
        return Err(CheckpointError::Entry {
            name: "<blob>".into(),
            reason: format!("{} trailing bytes", weights.len() as u64 - expected_offset),
        });
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn write_dir(dir: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
    let (manifest, blob) = encode(tensors)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest).map_err(io_err(&m))?;
    let w = dir.join(WEIGHTS_FILE);
    fs::write(&w, blob).map_err(io_err(&w))?;
    Ok(())
}

pub fn read_dir(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let m = dir.join(MANIFEST_FILE);
    let manifest = fs::read(&m).map_err(io_err(&m))?;
    let w = dir.join(WEIGHTS_FILE);
    let weights = fs::read(&w).map_err(io_err(&w))?;
    decode(&manifest, &weights)
}

/// Named tensors of a store (buffers included), optionally restricted to
/// some groups.
pub fn collect(store: &ParamStore, groups: Option<&[ParamGroup]>) -> Vec<(String, Tensor<f32>)> {
    store
        .iter()
        .filter(|(_, p)| groups.is_none_or(|g| g.contains(&p.group)))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

pub fn save(store: &ParamStore, dir: &Path, groups: Option<&[ParamGroup]>) -> Result<(), CheckpointError> {
    write_dir(dir, &collect(store, groups))
}

/// Loads every tensor of a checkpoint into matching store entries.
pub fn load(store: &mut ParamStore, dir: &Path) -> Result<usize, CheckpointError> {
    Ok(store.load_named(read_dir(dir)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
            ("b".into(), Tensor::new(&[3], vec![f32::NAN, f32::INFINITY, 1e-30]).unwrap()),
            ("s".into(), Tensor::scalar(2.0)),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let (m, w) = encode(&t).unwrap();
        assert_eq!(w.len(), 4 * 8);
        let back = decode(m.as_bytes(), &w).unwrap();
        for ((n0, t0), (n1, t1)) in t.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn manifest_uses_documented_fields() {
        let (m, _) = encode(&sample()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m).unwrap();
        let e = &v["entries"][1];
        assert_eq!(e["name"], "b");
        assert_eq!(e["dtype"], "f32");
        assert_eq!(e["offset"], 16);
        assert_eq!(e["length"], 12);
        assert_eq!(e["shape"], serde_json::json!([3]));
    }

    #[test]
    fn rejects_truncated_blob_and_bad_offsets() {
        let (m, w) = encode(&sample()).unwrap();
        assert!(decode(m.as_bytes(), &w[..w.len() - 1]).is_err());
        let mut extra = w.clone();
        extra.push(0);
        assert!(decode(m.as_bytes(), &extra).is_err());
        let swapped = m.replace("\"offset\": 16", "\"offset\": 20");
        assert!(decode(swapped.as_bytes(), &w).is_err());
        let f16 = m.replacen("\"f32\"", "\"f16\"", 1);
        assert!(decode(f16.as_bytes(), &w).is_err());
    }

    #[test]
    fn store_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(3);
        store.add("x", &[4], ParamGroup::Encoder, crate::params::Init::Normal(1.0)).unwrap();
        store.add("lora.y", &[2], ParamGroup::Lora, crate::params::Init::Normal(1.0)).unwrap();
        save(&store, dir.path(), Some(&[ParamGroup::Lora])).unwrap();
        let entries = read_dir(dir.path()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].0, "lora.y");

        let mut other = ParamStore::new(99);
        other.add("x", &[4], ParamGroup::Encoder, crate::params::Init::Zeros).unwrap();
        other.add("lora.y", &[2], ParamGroup::Lora, crate::params::Init::Zeros).unwrap();
        assert_eq!(load(&mut other, dir.path()).unwrap(), 1);
        assert_eq!(other.value(other.id("lora.y").unwrap()), store.value(store.id("lora.y").unwrap()));
    }
}
