//! Tensor checkpoints: a JSON manifest naming each tensor with its shape and
//! byte offset, next to a raw blob of little-endian `f32` values in
//! row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub format_version: u32,
    pub kind: String,
    pub blob: String,
    pub meta: M,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors read back from a checkpoint, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct TensorMap(pub BTreeMap<String, (Vec<usize>, Vec<f64>)>);

impl TensorMap {
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, data) = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Header(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::shape(format!("tensor {name}: shape {s:?}, expected {shape:?}")));
        }
        Ok(data)
    }
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, String) {
    let blob = format!("{stem}.bin");
    (dir.join(format!("{stem}.json")), dir.join(&blob), blob)
}

pub fn write_checkpoint<M: Serialize>(
    dir: &Path,
    stem: &str,
    kind: &str,
    meta: &M,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest_path, blob_path, blob_name) = paths(dir, stem);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("tensor {name} length does not match shape")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len(),
        });
        for v in data.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        blob: blob_name,
        meta,
        tensors: entries,
    };
    fs::write(&blob_path, blob)?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint<M: DeserializeOwned>(dir: &Path, stem: &str, kind: &str) -> Result<(M, TensorMap)> {
    let (manifest_path, _, _) = paths(dir, stem);
    let manifest: Manifest<M> = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if manifest.kind != kind {
        return Err(Error::Header(format!("checkpoint kind {}, expected {kind}", manifest.kind)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut map = BTreeMap::new();
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Truncated {
                expected: end,
                found: blob.len(),
            });
        }
        let data = blob[t.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        map.insert(t.name, (t.shape, data));
    }
    Ok((manifest.meta, TensorMap(map)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = [1.0, 2.5, -3.0, 0.125, 7.0, 8.0];
        let b = [0.5];
        write_checkpoint(
            dir.path(),
            "m",
            "test",
            &serde_json::json!({"k": 1}),
            &[("a".into(), vec![2, 3], &a[..]), ("b".into(), vec![1], &b[..])],
        )
        .unwrap();
        let (meta, mut t): (serde_json::Value, _) = read_checkpoint(dir.path(), "m", "test").unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(t.take("a", &[2, 3]).unwrap(), a.to_vec());
        assert!(t.take("b", &[2]).is_err());
        assert!(read_checkpoint::<serde_json::Value>(dir.path(), "m", "other").is_err());

        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_checkpoint::<serde_json::Value>(dir.path(), "m", "test"),
            Err(Error::Truncated { .. })
        ));
    }
}
