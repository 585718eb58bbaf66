use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Mat;
use crate::error::{Error, Result};

/// Identity of a parameter store inside a [`super::Graph`]. Fresh per store, never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreTag(u64);

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> StoreTag {
    StoreTag(NEXT_TAG.fetch_add(1, Ordering::Relaxed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
#[derive(Debug)]
pub struct ParamStore {
    tag: StoreTag,
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    /// The clone is a distinct store with its own tag.
    fn clone(&self) -> Self {
        Self { tag: fresh_tag(), names: self.names.clone(), values: self.values.clone(), lookup: self.lookup.clone() }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: fresh_tag(), names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    pub fn tag(&self) -> StoreTag {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let m = Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, m)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `<stem>.bin` (flat little-endian `f32`) and `<stem>.index.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.len());
        let mut bytes = Vec::with_capacity(self.num_scalars() * 4);
        let mut offset = 0;
        for (_, name, m) in self.iter() {
            index.push(IndexEntry { name: name.to_string(), shape: [m.nrows(), m.ncols()], offset });
            for x in m.iter() {
                bytes.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            offset += m.len();
        }
        fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
        fs::write(dir.join(format!("{stem}.index.json")), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let index: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.index.json")))?)?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;
        let mut store = Self::new();
        for e in index {
            let n = e.shape[0] * e.shape[1];
            let end = (e.offset + n) * 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("parameter {} overruns {stem}.bin", e.name)));
            }
            let data: Vec<f64> = bytes[e.offset * 4..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Array2::from_shape_vec((e.shape[0], e.shape[1]), data)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            store.add(e.name, m);
        }
        Ok(store)
    }

    /// Rounds every value through `f32`, matching what a save/load cycle produces.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            m.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Copies values from `other` into slots with matching names and shapes.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, dst) in self.names.iter().zip(self.values.iter_mut()) {
            if let Some(id) = other.id(name) {
                let src = other.get(id);
                if src.dim() == dst.dim() {
                    dst.assign(src);
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_matches_f32_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.normal("a.w", 3, 4, 1.0, &mut rng);
        s.zeros("a.b", 1, 4);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), "p").unwrap();
        let loaded = ParamStore::load(dir.path(), "p").unwrap();
        s.round_to_f32();
        assert_eq!(s.fingerprint(), loaded.fingerprint());
        assert_eq!(loaded.id("a.b"), Some(ParamId(1)));
    }

    #[test]
    fn clones_get_fresh_tags() {
        let s = ParamStore::new();
        let c = s.clone();
        assert_ne!(s.tag(), c.tag());
        assert_eq!(s.fingerprint(), c.fingerprint());
    }
}
