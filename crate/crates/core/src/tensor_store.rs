//! Named f32 tensor maps and the TPAK container format.
//!
//! Layout of a TPAK file:
//!
//! ```text
//! 0..4    magic "TPAK"
//! 4..8    version, u32 LE (= 1)
//! 8..16   header length H, u64 LE
//! 16..16+H  UTF-8 JSON header
//! 16+H..  payload: raw f32 LE data, tensors packed in name order
//! ```
//!
//! The header is `{"tensors": {name: {"dtype","shape","offset","nbytes"}}, "meta": {...}}`
//! with offsets relative to the payload start.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPAK";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn numel_of(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = numel_of(&shape).ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The weights of one model: tensors keyed by parameter name plus free-form
/// provenance metadata. Iteration is always in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Option<Tensor>> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor("empty parameter name".into()));
        }
        Ok(self.entries.insert(name, tensor))
    }

    /// Builder-style insert; panics on an empty name.
    pub fn with(mut self, name: &str, tensor: Tensor) -> Self {
        self.insert(name, tensor).expect("valid parameter name");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    /// Name/shape pairs in canonical order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Tensor-wise bitwise equality; metadata is ignored.
    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub shape_a: Vec<usize>,
    pub shape_b: Vec<usize>,
}

/// Structural differences between two tensor maps. Averaging is only
/// meaningful between maps whose parameter spaces line up exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return write!(f, "compatible");
        }
        let mut parts = Vec::new();
        if !self.missing_in_a.is_empty() {
            parts.push(format!("missing in a: {}", self.missing_in_a.join(", ")));
        }
        if !self.missing_in_b.is_empty() {
            parts.push(format!("missing in b: {}", self.missing_in_b.join(", ")));
        }
        for m in &self.shape_mismatches {
            parts.push(format!("{}: {:?} vs {:?}", m.name, m.shape_a, m.shape_b));
        }
        write!(f, "{}", parts.join("; "))
    }
}

pub fn check_compatibility(a: &TensorMap, b: &TensorMap) -> CompatibilityReport {
    compare_signatures(&a.signature(), &b.signature())
}

/// [`check_compatibility`] over name/shape signatures in canonical order.
pub fn compare_signatures(a: &[(String, Vec<usize>)], b: &[(String, Vec<usize>)]) -> CompatibilityReport {
    let b_map: BTreeMap<&str, &Vec<usize>> = b.iter().map(|(k, s)| (k.as_str(), s)).collect();
    let a_map: BTreeMap<&str, &Vec<usize>> = a.iter().map(|(k, s)| (k.as_str(), s)).collect();
    let mut missing_in_b = Vec::new();
    let mut shape_mismatches = Vec::new();
    for (name, shape_a) in &a_map {
        match b_map.get(name) {
            None => missing_in_b.push(name.to_string()),
            Some(shape_b) if shape_a != shape_b => shape_mismatches.push(ShapeMismatch {
                name: name.to_string(),
                shape_a: shape_a.to_vec(),
                shape_b: shape_b.to_vec(),
            }),
            Some(_) => {}
        }
    }
    let missing_in_a: Vec<String> = b_map
        .keys()
        .filter(|k| !a_map.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    CompatibilityReport {
        compatible: missing_in_a.is_empty() && missing_in_b.is_empty() && shape_mismatches.is_empty(),
        missing_in_a,
        missing_in_b,
        shape_mismatches,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CodecOptions {
    /// Accept NaN/Inf values instead of rejecting them.
    pub allow_nonfinite: bool,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn encode(tm: &TensorMap, opts: CodecOptions) -> Result<Vec<u8>> {
    if !opts.allow_nonfinite {
        if let Some(name) = tm.first_nonfinite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &tm.entries {
        let nbytes = (t.numel() * 4) as u64;
        tensors.insert(
            name.clone(),
            HeaderEntry {
                dtype: "f32".into(),
                shape: t.shape.iter().map(|&d| d as u64).collect(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: tm.meta.clone(),
    })?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tm.entries.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], opts: CodecOptions) -> Result<TensorMap> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::MalformedHeader("file shorter than the fixed preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::PayloadLengthMismatch(format!("header length {header_len} exceeds file size {}", bytes.len()))
        })?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut tm = TensorMap::new();
    let mut expected_offset = 0u64;
    for (name, entry) in header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::UnsupportedDtype(entry.dtype, name));
        }
        let shape: Vec<usize> = entry
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedHeader(format!("shape of {name:?} out of range")))?;
        let numel = numel_of(&shape).ok_or_else(|| Error::MalformedHeader(format!("shape of {name:?} overflows")))?;
        if entry.nbytes != numel as u64 * 4 {
            return Err(Error::MalformedHeader(format!(
                "{name:?}: nbytes {} does not match shape {shape:?}",
                entry.nbytes
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::MalformedHeader(format!(
                "{name:?}: offset {} is not packed (expected {expected_offset})",
                entry.offset
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > payload.len() {
            return Err(Error::PayloadLengthMismatch(format!(
                "{name:?} needs bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if !opts.allow_nonfinite && !tensor.is_finite() {
            return Err(Error::NonFinite(name));
        }
        tm.insert(name, tensor)?;
        expected_offset += entry.nbytes;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::PayloadLengthMismatch(format!(
            "header declares {expected_offset} bytes, payload has {}",
            payload.len()
        )));
    }
    tm.meta = header.meta;
    Ok(tm)
}

pub fn save_tensormap(tm: &TensorMap, path: &Path) -> Result<()> {
    save_tensormap_with(tm, path, CodecOptions::default())
}

pub fn save_tensormap_with(tm: &TensorMap, path: &Path, opts: CodecOptions) -> Result<()> {
    let bytes = encode(tm, opts)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load_tensormap(path: &Path) -> Result<TensorMap> {
    load_tensormap_with(path, CodecOptions::default())
}

pub fn load_tensormap_with(path: &Path, opts: CodecOptions) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, opts)
}
