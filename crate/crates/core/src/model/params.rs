//! Named parameter collections and their on-disk encoding.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How an entry is stored and whether it counts toward parameter memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// A trainable real value, stored at the backbone's float width.
    Real,
    /// Real-valued latent whose thresholded view is stored as one bit per entry.
    BinaryLatent,
    /// Running statistics: state, not parameters. Never counted, never
    /// updated by an optimizer.
    Buffer,
}

impl ParamKind {
    fn tag(self) -> u8 {
        match self {
            ParamKind::Real => 0,
            ParamKind::BinaryLatent => 1,
            ParamKind::Buffer => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    pub fn real(value: Tensor) -> Self {
        Self {
            kind: ParamKind::Real,
            value,
        }
    }

    pub fn latent(value: Tensor) -> Self {
        Self {
            kind: ParamKind::BinaryLatent,
            value,
        }
    }

    pub fn buffer(value: Tensor) -> Self {
        Self {
            kind: ParamKind::Buffer,
            value,
        }
    }

    /// Storage cost in bits.
    pub fn bits(&self, float_bits: u32) -> u64 {
        let n = self.value.len() as u64;
        match self.kind {
            ParamKind::Real => n * float_bits as u64,
            ParamKind::BinaryLatent => n,
            ParamKind::Buffer => 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Option<Param> {
        self.entries.insert(name.into(), param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical (lexicographic name) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn bits(&self, float_bits: u32) -> u64 {
        self.entries.values().map(|p| p.bits(float_bits)).sum()
    }

    /// SHA-256 over names, kinds, shapes and the exact bit patterns of every
    /// value, in canonical order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, param) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update([param.kind.tag()]);
            hasher.update((param.value.shape().len() as u64).to_le_bytes());
            for &d in param.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in param.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the set as a JSON header line followed by raw little-endian
    /// `f64` payloads in header order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = WeightsHeader {
            format: WEIGHTS_FORMAT.into(),
            entries: self
                .entries
                .iter()
                .map(|(name, p)| HeaderEntry {
                    name: name.clone(),
                    kind: p.kind,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in self.entries.values() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    /// Decodes the format written by [`ParamSet::write_to`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("weights file has no header line".into()))?;
        let header: WeightsHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Parse(format!("weights header: {e}")))?;
        if header.format != WEIGHTS_FORMAT {
            return Err(Error::Parse(format!("unsupported weights format `{}`", header.format)));
        }
        let mut payload = &bytes[newline + 1..];
        let mut set = ParamSet::new();
        for entry in header.entries {
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Parse(format!("shape overflow for `{}`", entry.name)))?;
            let needed = count
                .checked_mul(8)
                .filter(|&n| n <= payload.len())
                .ok_or_else(|| Error::Parse(format!("truncated payload for `{}`", entry.name)))?;
            let data = payload[..needed]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            payload = &payload[needed..];
            let value = Tensor::new(entry.shape, data)?;
            if set
                .insert(entry.name.clone(), Param { kind: entry.kind, value })
                .is_some()
            {
                return Err(Error::Parse(format!("duplicate entry `{}`", entry.name)));
            }
        }
        if !payload.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes", payload.len())));
        }
        Ok(set)
    }
}

const WEIGHTS_FORMAT: &str = "smtl-weights/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    format: String,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

/// Backbone parameters referenced by every task model built on them.
pub type SharedParams = Arc<RwLock<ParamSet>>;

pub fn share(set: ParamSet) -> SharedParams {
    Arc::new(RwLock::new(set))
}
