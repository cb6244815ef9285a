//! Parameter checkpoints: flat float64 little-endian blob plus a JSON map
//! from entry name to offset and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// Offset into the blob, counted in f64 elements.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMap {
    pub total_len: usize,
    pub entries: BTreeMap<String, CheckpointEntry>,
}

/// Writes `<stem>.bin` (raw f64 LE) and `<stem>.json` (structure map).
pub fn save(store: &ParamStore, stem: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = BTreeMap::new();
    let mut offset = 0usize;
    for e in store.entries() {
        entries.insert(
            e.name.clone(),
            CheckpointEntry {
                offset,
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            },
        );
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += e.value.numel();
    }
    let map = CheckpointMap {
        total_len: offset,
        entries,
    };
    fs::write(stem.with_extension("bin"), &blob)?;
    fs::write(
        stem.with_extension("json"),
        serde_json::to_vec_pretty(&map)?,
    )?;
    Ok(())
}

pub fn read_map(stem: &Path) -> Result<CheckpointMap> {
    let text = fs::read(stem.with_extension("json"))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Loads a checkpoint into an existing store; every entry must match by name
/// and shape.
pub fn load(store: &mut ParamStore, stem: &Path) -> Result<()> {
    let map = read_map(stem)?;
    let blob = fs::read(stem.with_extension("bin"))?;
    if blob.len() != map.total_len * 8 {
        return Err(Error::Dataset(format!(
            "checkpoint blob {} has {} bytes, map wants {}",
            stem.display(),
            blob.len(),
            map.total_len * 8
        )));
    }
    for idx in 0..store.len() {
        let name = store.entries()[idx].name.clone();
        let entry = map.entries.get(&name).ok_or_else(|| {
            Error::Dataset(format!("checkpoint is missing parameter {name}"))
        })?;
        if entry.shape != store.entries()[idx].value.shape() {
            return Err(Error::Dataset(format!(
                "checkpoint parameter {name} has shape {:?}, model wants {:?}",
                entry.shape,
                store.entries()[idx].value.shape()
            )));
        }
        let n = store.entries()[idx].value.numel();
        let start = entry.offset * 8;
        if start + n * 8 > blob.len() {
            return Err(Error::Dataset(format!(
                "checkpoint parameter {name} overruns the blob"
            )));
        }
        let dst = store.entry_mut(idx).value.data_mut();
        for i in 0..n {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[start + i * 8..start + (i + 1) * 8]);
            dst[i] = f64::from_le_bytes(bytes);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut store = ParamStore::new();
        store.register(
            "a.weight",
            Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
            true,
        );
        store.register("a.running_mean", Tensor::filled(&[2], 0.125), false);
        save(&store, &stem).unwrap();

        let mut other = store.clone();
        for idx in 0..other.len() {
            other.entry_mut(idx).value.data_mut().fill(9.0);
        }
        load(&mut other, &stem).unwrap();
        for (a, b) in store.entries().iter().zip(other.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2, 3]), true);
        save(&store, &stem).unwrap();
        let mut wrong = ParamStore::new();
        wrong.register("w", Tensor::zeros(&[3, 2]), true);
        assert!(load(&mut wrong, &stem).is_err());
    }
}
