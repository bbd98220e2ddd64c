//! Named parameter storage with binary serialization and content hashing.
//!
//! On-disk layout: a magic line, one JSON header line (entry names, shapes,
//! and a free-form string metadata map), then the raw little-endian f64
//! payload in entry order. Save/load round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad weights file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("weights header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("unknown parameter name {0}")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

const MAGIC: &[u8] = b"TACW1\n";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    entries: Vec<HeaderEntry>,
}

/// Flat list of named f64 tensors. Insertion order is the id order and is
/// preserved by serialization, so ids are stable across save/load.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
    /// Free-form provenance (e.g. the fingerprint of a companion model).
    pub meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<D: ndarray::Dimension>(
        &mut self,
        name: &str,
        value: ndarray::Array<f64, D>,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value.into_dyn());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    fn digest_params(&self, ids: impl Iterator<Item = ParamId>) -> String {
        let mut hasher = Sha256::new();
        for id in ids {
            hasher.update(self.names[id.0].as_bytes());
            hasher.update([0x1f]);
            for d in self.values[id.0].shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in self.values[id.0].iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Content hash over every parameter (names, shapes, exact bits).
    pub fn fingerprint(&self) -> String {
        self.digest_params(self.ids())
    }

    /// Content hash over a subset; used to assert parameters stayed frozen.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        self.digest_params(ids.iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let header = Header {
            meta: self.meta.clone(),
            entries: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| HeaderEntry { name: name.clone(), shape: v.shape().to_vec() })
                .collect(),
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        file.write_all(MAGIC).map_err(io)?;
        let mut header_text = serde_json::to_string(&header)?;
        header_text.push('\n');
        file.write_all(header_text.as_bytes()).map_err(io)?;
        for v in &self.values {
            for x in v.iter() {
                file.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        file.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let bad = |reason: &str| StoreError::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut data = Vec::new();
        file.read_to_end(&mut data).map_err(io)?;
        if !data.starts_with(MAGIC) {
            return Err(bad("missing magic"));
        }
        let rest = &data[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        let mut blob = &rest[nl + 1..];
        let mut store = ParamStore::new();
        store.meta = header.meta;
        for e in header.entries {
            let count: usize = e.shape.iter().product();
            let bytes = count * 8;
            if blob.len() < bytes {
                return Err(bad("payload truncated"));
            }
            let mut vals = Vec::with_capacity(count);
            for chunk in blob[..bytes].chunks_exact(8) {
                vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            blob = &blob[bytes..];
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|_| bad("shape/payload mismatch"))?;
            if store.index.contains_key(&e.name) {
                return Err(StoreError::DuplicateName(e.name));
            }
            store.add(&e.name, arr);
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("w1", arr2(&[[1.0, -2.5e-300], [3.0, f64::MIN_POSITIVE]]));
        store.add("b1", ndarray::arr1(&[0.1, 0.2, 0.3]));
        store.meta.insert("codec_fingerprint".into(), "abc123".into());
        let dir = std::env::temp_dir().join("tacgen_nn_store");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.bin");
        store.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.meta.get("codec_fingerprint").unwrap(), "abc123");
        assert_eq!(back.fingerprint(), store.fingerprint());
        let w1 = back.get(back.id_of("w1").unwrap());
        for (a, b) in w1.iter().zip(store.get(ParamId(0)).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checksum_tracks_only_selected_params() {
        let mut store = ParamStore::new();
        let a = store.add("frozen.w", ndarray::arr1(&[1.0, 2.0]));
        let b = store.add("trained.w", ndarray::arr1(&[3.0]));
        let before = store.checksum(&[a]);
        store.get_mut(b)[[0]] = 99.0;
        assert_eq!(store.checksum(&[a]), before);
        store.get_mut(a)[[0]] = 0.0;
        assert_ne!(store.checksum(&[a]), before);
    }

    #[test]
    fn prefix_query_selects_ids() {
        let mut store = ParamStore::new();
        store.add("ctrl.block0.w", ndarray::arr1(&[1.0]));
        store.add("base.block0.w", ndarray::arr1(&[1.0]));
        store.add("ctrl.proj.w", ndarray::arr1(&[1.0]));
        let ids = store.ids_with_prefix("ctrl.");
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|id| store.name(*id).starts_with("ctrl.")));
    }
}
