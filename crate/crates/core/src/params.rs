//! Named parameter maps with a frozen/trainable partition, and the binary
//! checkpoint container they are stored in.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "MTCK" | version u32 | header length u64 | header JSON | f64 payload
//! ```
//!
//! The JSON header lists every entry (name, shape, frozen flag) in payload
//! order plus a free-form `meta` object; readers ignore unknown header keys,
//! so minor versions can add metadata without breaking older files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeMap<String, bool>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.frozen.insert(name.clone(), false);
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.get(name).copied().unwrap_or(true)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if let Some(f) = self.frozen.get_mut(name) {
            *f = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.values_mut().for_each(|f| *f = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.values_mut().for_each(|f| *f = false);
    }

    /// Sets the frozen flag of every entry whose path starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (k, f) in self.frozen.iter_mut() {
            if k.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| !self.is_frozen(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Count of scalars under a path prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Bitwise equality of the frozen entries of `self` and `other`.
    pub fn frozen_entries_identical(&self, other: &ParameterSet) -> bool {
        self.entries.iter().filter(|(k, _)| self.is_frozen(k)).all(|(k, v)| {
            other.get(k).is_some_and(|o| {
                o.shape() == v.shape()
                    && o.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
        })
    }

    /// SHA-256 over names, shapes and raw bits of every entry.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Uniform initializer in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

/// Variance-scaling (He) uniform initializer for a weight whose leading
/// dimensions multiply to `fan_in`.
pub fn variance_scaling(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in.max(1) as f64).sqrt())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

/// A parameter map plus the metadata needed to rebuild the model around it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self
                .params
                .iter()
                .map(|(k, v)| EntryHeader {
                    name: k.clone(),
                    shape: v.shape().to_vec(),
                    frozen: self.params.is_frozen(k),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.params.count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.params.iter() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut off = 16 + hlen;
        let mut params = ParameterSet::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload in `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            params.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
            params.set_frozen(&e.name, e.frozen);
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the checkpoint kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        p.insert("b", Tensor::scalar(0.1));
        p.set_frozen("a.w", true);
        p
    }

    #[test]
    fn partition_counts() {
        let p = sample();
        assert_eq!(p.count(), 5);
        assert_eq!(p.trainable_count(), 1);
        assert!(p.is_frozen("a.w"));
        assert!(p.is_frozen("missing"));
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint {
            kind: "base".into(),
            meta: serde_json::json!({}),
            params: sample(),
        };
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
                                 frozen in any::<bool>()) {
            let mut p = ParameterSet::new();
            p.insert("x", Tensor::from_vec(&[values.len()], values.clone()));
            p.insert("y.z", Tensor::scalar(values[0]));
            p.set_frozen("x", frozen);
            let ck = Checkpoint { kind: "k".into(), meta: serde_json::json!({"a": 1}), params: p.clone() };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.params.digest(), p.digest());
            prop_assert_eq!(back.params.is_frozen("x"), frozen);
            prop_assert_eq!(back.meta, ck.meta);
        }
    }
}
