//! Named, ordered tensor collections and their on-disk format.
//!
//! A saved set is two files: a JSON manifest listing each tensor's name,
//! shape and offset, and a blob of little-endian `f64` values in manifest
//! order. Loading checks the blob length and every shape against the
//! manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dkm-params/1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (n, t) in other.entries {
            self.push(n, t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}.");
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn prefixed(self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .into_iter()
                .map(|(n, t)| (format!("{prefix}.{n}"), t))
                .collect(),
        }
    }

    pub fn manifest(&self, meta: serde_json::Value) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        Manifest {
            format: FORMAT.to_string(),
            tensors,
            meta,
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * 8);
        for (_, t) in &self.entries {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT {
            return Err(Error::Format(format!(
                "unsupported format {:?}, expected {FORMAT}",
                manifest.format
            )));
        }
        if !blob.len().is_multiple_of(8) {
            return Err(Error::Format("blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut set = ParamSet::new();
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + len > values.len() {
                return Err(Error::Format(format!(
                    "tensor {} (shape {:?}, offset {}) does not fit the blob",
                    e.name, e.shape, e.offset
                )));
            }
            let t = Tensor::new(e.shape.clone(), values[e.offset..e.offset + len].to_vec())
                .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
            set.push(e.name.clone(), t)?;
            expected_offset += len;
        }
        if expected_offset != values.len() {
            return Err(Error::Format(format!(
                "blob holds {} values, manifest describes {expected_offset}",
                values.len()
            )));
        }
        Ok(set)
    }

    /// Writes `<stem>.json` and `<stem>.bin` next to each other.
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let manifest = self.manifest(meta);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(stem.with_extension("json"), json)?;
        fs::write(stem.with_extension("bin"), self.to_blob())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, Manifest)> {
        let json = fs::read_to_string(stem.with_extension("json"))?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| Error::Format(e.to_string()))?;
        let blob = fs::read(stem.with_extension("bin"))?;
        let set = Self::from_parts(&manifest, &blob)?;
        Ok((set, manifest))
    }
}
