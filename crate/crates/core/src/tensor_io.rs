//! The `.alfb` tensor bundle container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4            magic "ALFB"
//! 4..8            version (u32)
//! 8..16           header_len (u64)
//! 16..16+len      UTF-8 JSON header {"meta": {..}, "tensors": [..]}
//! 16+len..        payload region; record offsets are relative to its start
//! ```
//!
//! Every record starts at a payload offset divisible by 8 and the JSON header
//! is padded with trailing spaces so the payload region itself starts on an
//! 8-byte boundary of the file.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ALFB";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 8;
const PREFIX_LEN: usize = 16;

/// Bundle kinds understood by the engine. Bundles without a `kind` entry are
/// treated as untyped containers and only checked structurally.
pub const KINDS: [&str; 4] = ["image", "text", "bank", "map"];

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"ALFB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated bundle: {0}")]
    Truncated(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: shape {shape:?} needs {expected} bytes, got {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {name:?}: offset {offset} is not {ALIGN}-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("tensors {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
    #[error("meta {key:?}: {reason}")]
    InvalidMeta { key: String, reason: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, BundleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleHeader {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderJson {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &dim| acc.checked_mul(dim as u64))
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        } as u64;
        match element_count(&shape) {
            Some(n) if n == len => Ok(Self { shape, data }),
            n => Err(BundleError::ShapeMismatch {
                name: String::new(),
                expected: n.unwrap_or(u64::MAX).saturating_mul(dtype_of(&data).size()),
                actual: len * dtype_of(&data).size(),
                shape,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        dtype_of(&self.data)
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn byte_len(&self) -> u64 {
        element_count(&self.shape).unwrap_or(0) * self.dtype().size()
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => {
                out.reserve(v.len() * 4);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
}

fn dtype_of(data: &TensorData) -> DType {
    match data {
        TensorData::F32(_) => DType::F32,
        TensorData::U8(_) => DType::U8,
    }
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// An in-memory bundle: string metadata plus named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: &str) -> Self {
        let mut bundle = Self::new();
        bundle.set_meta("kind", kind);
        bundle
    }

    pub fn from_parts(
        meta: BTreeMap<String, String>,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut bundle = Bundle {
            meta,
            tensors: Vec::with_capacity(tensors.len()),
        };
        for (name, tensor) in tensors {
            bundle.insert(name, tensor)?;
        }
        Ok(bundle)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(BundleError::DuplicateName(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| BundleError::MissingTensor(name.to_string()))
    }

    /// Looks up an f32 tensor and checks its shape.
    pub fn f32_tensor(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let tensor = self.tensor(name)?;
        let data = tensor.as_f32().ok_or_else(|| BundleError::BadTensor {
            name: name.to_string(),
            reason: "expected dtype f32".into(),
        })?;
        if tensor.shape() != shape {
            return Err(BundleError::BadTensor {
                name: name.to_string(),
                reason: format!("expected shape {shape:?}, got {:?}", tensor.shape()),
            });
        }
        Ok(data)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| BundleError::InvalidMeta {
                key: key.to_string(),
                reason: "missing".into(),
            })
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self.meta_str(key)?;
        raw.trim().parse().map_err(|_| BundleError::InvalidMeta {
            key: key.to_string(),
            reason: format!("{raw:?} is not a non-negative integer"),
        })
    }

    /// Parses a comma-separated list of positive integers, e.g. `"2,3"`.
    pub fn meta_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.meta_str(key)?;
        parse_usize_list(raw).ok_or_else(|| BundleError::InvalidMeta {
            key: key.to_string(),
            reason: format!("{raw:?} is not a list of positive integers"),
        })
    }

    /// Header with offsets assigned by the alignment rule.
    pub fn header(&self) -> BundleHeader {
        let mut cursor = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let offset = align_up(cursor);
                let byte_len = t.byte_len();
                cursor = offset + byte_len;
                TensorRecord {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    byte_len,
                }
            })
            .collect();
        BundleHeader {
            version: VERSION,
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_bundle(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_bundle(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_bundle(&std::fs::read(path)?)
    }
}

pub(crate) fn parse_usize_list(raw: &str) -> Option<Vec<usize>> {
    let list = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()?;
    (!list.is_empty()).then_some(list)
}

pub fn write_bundle<W: Write>(bundle: &Bundle, out: &mut W) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, tensor) in &bundle.tensors {
        if !seen.insert(name.as_str()) {
            return Err(BundleError::DuplicateName(name.clone()));
        }
        let expected = element_count(&tensor.shape).map(|n| n * tensor.dtype().size());
        let actual = match &tensor.data {
            TensorData::F32(v) => v.len() as u64 * 4,
            TensorData::U8(v) => v.len() as u64,
        };
        if expected != Some(actual) {
            return Err(BundleError::ShapeMismatch {
                name: name.clone(),
                shape: tensor.shape.clone(),
                expected: expected.unwrap_or(u64::MAX),
                actual,
            });
        }
    }

    let header = bundle.header();
    let mut json = serde_json::to_vec(&HeaderJson {
        meta: header.meta,
        tensors: header.tensors.clone(),
    })
    .map_err(|e| BundleError::InvalidHeader(e.to_string()))?;
    let padded = align_up((PREFIX_LEN + json.len()) as u64) as usize - PREFIX_LEN;
    json.resize(padded, b' ');

    let payload_len = header
        .tensors
        .last()
        .map_or(0, |r| (r.offset + r.byte_len) as usize);
    let mut buf = Vec::with_capacity(PREFIX_LEN + json.len() + payload_len);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let payload_start = buf.len();
    for (record, (_, tensor)) in header.tensors.iter().zip(&bundle.tensors) {
        buf.resize(payload_start + record.offset as usize, 0);
        tensor.write_payload(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses and fully validates a bundle. Nothing is returned unless every
/// structural invariant (and the kind-specific metadata rules) holds.
pub fn read_bundle(bytes: &[u8]) -> Result<Bundle> {
    if bytes.len() < PREFIX_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(BundleError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(BundleError::Truncated(format!(
            "{} bytes is shorter than the {PREFIX_LEN}-byte prefix",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = (PREFIX_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            BundleError::Truncated(format!("header of {header_len} bytes exceeds file"))
        })? as usize;
    let header: HeaderJson = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| BundleError::InvalidHeader(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut seen = HashSet::new();
    for record in &header.tensors {
        if !seen.insert(record.name.as_str()) {
            return Err(BundleError::DuplicateName(record.name.clone()));
        }
        let expected =
            element_count(&record.shape).and_then(|n| n.checked_mul(record.dtype.size()));
        if expected != Some(record.byte_len) {
            return Err(BundleError::ShapeMismatch {
                name: record.name.clone(),
                shape: record.shape.clone(),
                expected: expected.unwrap_or(u64::MAX),
                actual: record.byte_len,
            });
        }
        if record.offset % ALIGN != 0 {
            return Err(BundleError::Misaligned {
                name: record.name.clone(),
                offset: record.offset,
            });
        }
        match record.offset.checked_add(record.byte_len) {
            Some(end) if end <= payload.len() as u64 => {}
            _ => {
                return Err(BundleError::Truncated(format!(
                    "tensor {:?} spans [{}, {}+{}) but payload has {} bytes",
                    record.name,
                    record.offset,
                    record.offset,
                    record.byte_len,
                    payload.len()
                )))
            }
        }
    }

    let mut by_offset: Vec<&TensorRecord> =
        header.tensors.iter().filter(|r| r.byte_len > 0).collect();
    by_offset.sort_by_key(|r| r.offset);
    for pair in by_offset.windows(2) {
        if pair[0].offset + pair[0].byte_len > pair[1].offset {
            return Err(BundleError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for record in header.tensors {
        let start = record.offset as usize;
        let raw = &payload[start..start + record.byte_len as usize];
        let data = match record.dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(raw.to_vec()),
        };
        tensors.push((
            record.name,
            Tensor {
                shape: record.shape,
                data,
            },
        ));
    }
    let bundle = Bundle {
        meta: header.meta,
        tensors,
    };
    validate_meta(&bundle)?;
    Ok(bundle)
}

/// Kind-specific metadata rules. Untyped bundles (no `kind`) always pass.
pub fn validate_meta(bundle: &Bundle) -> Result<()> {
    let Some(kind) = bundle.kind() else {
        return Ok(());
    };
    if !KINDS.contains(&kind) {
        return Err(BundleError::InvalidMeta {
            key: "kind".into(),
            reason: format!("unknown kind {kind:?}"),
        });
    }
    if kind == "map" {
        bundle.meta_usize("image_h")?;
        bundle.meta_usize("image_w")?;
        return Ok(());
    }
    let dim = bundle.meta_usize("embed_dim")?;
    if dim == 0 {
        return Err(BundleError::InvalidMeta {
            key: "embed_dim".into(),
            reason: "must be positive".into(),
        });
    }
    for (name, tensor) in bundle.tensors() {
        if tensor.dtype() == DType::F32 && tensor.shape().last() != Some(&dim) {
            return Err(BundleError::InvalidMeta {
                key: "embed_dim".into(),
                reason: format!(
                    "tensor {name:?} has shape {:?}, last axis must be {dim}",
                    tensor.shape()
                ),
            });
        }
    }
    if kind == "image" {
        for key in ["grid_h", "grid_w", "image_h", "image_w"] {
            bundle.meta_usize(key)?;
        }
        bundle.meta_usize_list("scales")?;
        bundle.meta_str("source_path")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bundle {
        let mut b = Bundle::new();
        b.set_meta("note", "x");
        b.insert(
            "a",
            Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        b
    }

    #[test]
    fn empty_bundle_is_prefix_plus_json() {
        let bytes = Bundle::new().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ALFB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + len);
        assert_eq!(bytes.len() % 8, 0);
        let back = read_bundle(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let b = sample();
        let back = read_bundle(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(
            back.get("a").unwrap().as_f32().unwrap(),
            &[1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn second_record_is_padded_to_eight() {
        let mut b = Bundle::new();
        b.insert("x", Tensor::from_f32(vec![1], vec![1.0]).unwrap())
            .unwrap();
        b.insert("y", Tensor::from_u8(vec![4], vec![1, 0, 1, 0]).unwrap())
            .unwrap();
        let header = b.header();
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 8);
        let bytes = b.to_bytes().unwrap();
        let start = bytes.len() - 12;
        assert_eq!(&bytes[start + 4..start + 8], &[0, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_bundle(&bytes), Err(BundleError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_bundle(&bytes),
            Err(BundleError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_bundle(cut), Err(BundleError::Truncated(_))));
        assert!(matches!(
            read_bundle(&bytes[..10]),
            Err(BundleError::Truncated(_))
        ));
    }

    fn forge(meta_tensors: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ALFB");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(meta_tensors.len() as u64).to_le_bytes());
        out.extend_from_slice(meta_tensors.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn rejects_overlapping_records() {
        let json = r#"{"meta":{},"tensors":[
            {"name":"a","dtype":"f32","shape":[4],"offset":0,"byte_len":16},
            {"name":"b","dtype":"u8","shape":[8],"offset":8,"byte_len":8}]}"#;
        let bytes = forge(json, &[0u8; 16]);
        assert!(matches!(
            read_bundle(&bytes),
            Err(BundleError::Overlap { .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_records() {
        let json = r#"{"meta":{},"tensors":[
            {"name":"a","dtype":"f32","shape":[3],"offset":0,"byte_len":16}]}"#;
        assert!(matches!(
            read_bundle(&forge(json, &[0u8; 16])),
            Err(BundleError::ShapeMismatch { .. })
        ));
        let json = r#"{"meta":{},"tensors":[
            {"name":"a","dtype":"u8","shape":[1],"offset":3,"byte_len":1}]}"#;
        assert!(matches!(
            read_bundle(&forge(json, &[0u8; 8])),
            Err(BundleError::Misaligned { .. })
        ));
        let json = r#"{"meta":{},"tensors":[
            {"name":"a","dtype":"u8","shape":[1],"offset":0,"byte_len":1},
            {"name":"a","dtype":"u8","shape":[1],"offset":8,"byte_len":1}]}"#;
        assert!(matches!(
            read_bundle(&forge(json, &[0u8; 9])),
            Err(BundleError::DuplicateName(_))
        ));
        assert!(matches!(
            read_bundle(&forge("{not json", &[])),
            Err(BundleError::InvalidHeader(_))
        ));
    }

    #[test]
    fn duplicate_and_mismatched_tensors_are_rejected_on_build() {
        let mut b = sample();
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            b.insert("a", t),
            Err(BundleError::DuplicateName(_))
        ));
        assert!(matches!(
            Tensor::from_f32(vec![2, 3], vec![0.0; 5]),
            Err(BundleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn typed_meta_is_validated() {
        let mut b = Bundle::with_kind("text");
        b.set_meta("embed_dim", 3);
        b.insert(
            "emb_normal",
            Tensor::from_f32(vec![1, 4], vec![0.0; 4]).unwrap(),
        )
        .unwrap();
        let bytes = b.to_bytes().unwrap();
        assert!(matches!(
            read_bundle(&bytes),
            Err(BundleError::InvalidMeta { .. })
        ));

        let mut b = Bundle::with_kind("image");
        b.set_meta("embed_dim", 2);
        assert!(matches!(
            read_bundle(&b.to_bytes().unwrap()),
            Err(BundleError::InvalidMeta { .. })
        ));

        let b = Bundle::with_kind("widget");
        assert!(read_bundle(&b.to_bytes().unwrap()).is_err());
    }
}
