//! Single-file binary container (`.zdc1`) for datasets, checkpoints, and
//! generated samples.
//!
//! Layout: one UTF-8 JSON header line terminated by `\n`, immediately
//! followed by the raw little-endian payload of every array, concatenated
//! in descriptor order. Byte offsets are relative to the first byte after
//! the header newline. No compression, no alignment padding.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &str = "ZDC1";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "zdc1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a ZDC1 container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),
    #[error("truncated payload: descriptors require {needed} bytes, file has {found}")]
    TruncatedPayload { needed: u64, found: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("{extra} trailing bytes after declared payload")]
    TrailingBytes { extra: u64 },
    #[error("duplicate array name {0:?}")]
    DuplicateName(String),
    #[error("descriptor {name:?} invalid: {reason}")]
    BadDescriptor { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

/// One array's raw values. On disk every variant is little-endian.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().element_size()
    }

    fn write_le<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::I64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn from_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I64 => ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let a = NamedArray { name: name.into(), shape, data: ArrayData::F32(data) };
        a.check_len();
        a
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let a = NamedArray { name: name.into(), shape, data: ArrayData::F64(data) };
        a.check_len();
        a
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Self {
        let a = NamedArray { name: name.into(), shape, data: ArrayData::I64(data) };
        a.check_len();
        a
    }

    fn check_len(&self) {
        let n: usize = self.shape.iter().product();
        assert_eq!(n, self.data.len(), "array {:?}: shape/data length mismatch", self.name);
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            ArrayData::I64(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    dtype: Dtype,
    shape: Vec<u64>,
    byte_offset: u64,
    byte_length: u64,
}

/// Header as one JSON line. `magic` is serialized first so a well-formed
/// file always starts with `{"magic":"ZDC1",...`.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    metadata: serde_json::Value,
    arrays: Vec<ArrayDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn format_kind(&self) -> Option<&str> {
        self.metadata.get("format_kind").and_then(|v| v.as_str())
    }
}

fn check_unique_names(arrays: &[NamedArray]) -> Result<(), ContainerError> {
    let mut seen = std::collections::BTreeSet::new();
    for a in arrays {
        if !seen.insert(a.name.as_str()) {
            return Err(ContainerError::DuplicateName(a.name.clone()));
        }
    }
    Ok(())
}

/// Serializes the container to `path`. Output bytes are a deterministic
/// function of the inputs: JSON object keys in `metadata` are emitted in
/// sorted order and arrays in the given order.
pub fn write_container(
    path: impl AsRef<Path>,
    metadata: &serde_json::Value,
    arrays: &[NamedArray],
) -> Result<(), ContainerError> {
    check_unique_names(arrays)?;
    let mut descriptors = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for a in arrays {
        a.check_len();
        let len = a.data.byte_len() as u64;
        descriptors.push(ArrayDescriptor {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.iter().map(|&d| d as u64).collect(),
            byte_offset: offset,
            byte_length: len,
        });
        offset += len;
    }
    let header = Header {
        magic: MAGIC.to_string(),
        version: VERSION,
        metadata: metadata.clone(),
        arrays: descriptors,
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(header_line.as_bytes())?;
    w.write_all(b"\n")?;
    for a in arrays {
        a.data.write_le(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ContainerError::MalformedHeader("no header newline".into()))?;
    let header_bytes = &bytes[..newline];
    let payload = &bytes[newline + 1..];

    let header: Header = match serde_json::from_slice(header_bytes) {
        Ok(h) => h,
        // A file that does not even open a JSON object is some other format.
        Err(_) if header_bytes.first() != Some(&b'{') => return Err(ContainerError::BadMagic),
        Err(e) => return Err(ContainerError::MalformedHeader(e.to_string())),
    };
    if header.magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if header.version != VERSION {
        return Err(ContainerError::VersionUnsupported(header.version));
    }

    let mut expected_offset = 0u64;
    let mut names = std::collections::BTreeSet::new();
    for d in &header.arrays {
        if !names.insert(d.name.as_str()) {
            return Err(ContainerError::DuplicateName(d.name.clone()));
        }
        let count: u64 = d.shape.iter().product();
        let expected_len = count * d.dtype.element_size() as u64;
        if d.byte_length != expected_len {
            return Err(ContainerError::BadDescriptor {
                name: d.name.clone(),
                reason: format!(
                    "byte_length {} does not match shape {:?} ({} expected)",
                    d.byte_length, d.shape, expected_len
                ),
            });
        }
        if d.byte_offset != expected_offset {
            return Err(ContainerError::BadDescriptor {
                name: d.name.clone(),
                reason: format!(
                    "byte_offset {} breaks contiguity (expected {})",
                    d.byte_offset, expected_offset
                ),
            });
        }
        expected_offset += d.byte_length;
    }

    let found = payload.len() as u64;
    if found < expected_offset {
        return Err(ContainerError::TruncatedPayload { needed: expected_offset, found });
    }
    if found > expected_offset {
        return Err(ContainerError::TrailingBytes { extra: found - expected_offset });
    }

    let arrays = header
        .arrays
        .iter()
        .map(|d| {
            let start = d.byte_offset as usize;
            let end = start + d.byte_length as usize;
            NamedArray {
                name: d.name.clone(),
                shape: d.shape.iter().map(|&x| x as usize).collect(),
                data: ArrayData::from_le(d.dtype, &payload[start..end]),
            }
        })
        .collect();

    Ok(Container { metadata: header.metadata, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("zdc_container_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn zero_round_trip() {
        let path = tmp("zero.zdc1");
        let arrays = vec![NamedArray::f32("a", vec![1], vec![0.0])];
        write_container(&path, &json!({"format_kind": "dataset"}), &arrays).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.arrays, arrays);
        // payload is exactly four zero bytes
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[nl + 1..], &[0u8, 0, 0, 0]);
    }

    #[test]
    fn empty_container() {
        let path = tmp("empty.zdc1");
        write_container(&path, &json!({"format_kind": "dataset"}), &[]).unwrap();
        let c = read_container(&path).unwrap();
        assert!(c.arrays.is_empty());
        assert_eq!(c.format_kind(), Some("dataset"));
    }

    #[test]
    fn bad_magic_literal() {
        let path = tmp("badmagic.zdc1");
        fs::write(&path, b"XXXX not a container\npayload").unwrap();
        match read_container(&path) {
            Err(ContainerError::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_wrong_field() {
        let path = tmp("badmagic2.zdc1");
        fs::write(&path, b"{\"magic\":\"ZDC9\",\"version\":1,\"metadata\":{},\"arrays\":[]}\n")
            .unwrap();
        match read_container(&path) {
            Err(ContainerError::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let path = tmp("trunc.zdc1");
        let arrays = vec![NamedArray::f64("a", vec![1], vec![1.0])];
        write_container(&path, &json!({}), &arrays).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4); // 8-byte payload cut to 4
        fs::write(&path, &bytes).unwrap();
        match read_container(&path) {
            Err(ContainerError::TruncatedPayload { needed: 8, found: 4 }) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let path = tmp("trailing.zdc1");
        write_container(&path, &json!({}), &[]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0xFF);
        fs::write(&path, &bytes).unwrap();
        match read_container(&path) {
            Err(ContainerError::TrailingBytes { extra: 1 }) => {}
            other => panic!("expected TrailingBytes, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let path = tmp("dup.zdc1");
        let arrays = vec![
            NamedArray::f32("a", vec![1], vec![0.0]),
            NamedArray::f32("a", vec![1], vec![1.0]),
        ];
        match write_container(&path, &json!({}), &arrays) {
            Err(ContainerError::DuplicateName(n)) => assert_eq!(n, "a"),
            other => panic!("expected DuplicateName, got {other:?}"),
        }
    }

    #[test]
    fn version_unsupported() {
        let path = tmp("version.zdc1");
        fs::write(&path, b"{\"magic\":\"ZDC1\",\"version\":2,\"metadata\":{},\"arrays\":[]}\n")
            .unwrap();
        match read_container(&path) {
            Err(ContainerError::VersionUnsupported(2)) => {}
            other => panic!("expected VersionUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_json() {
        let path = tmp("malformed.zdc1");
        fs::write(&path, b"{\"magic\":\"ZDC1\",\"version\":\n").unwrap();
        match read_container(&path) {
            Err(ContainerError::MalformedHeader(_)) => {}
            other => panic!("expected MalformedHeader, got {other:?}"),
        }
    }

    /// Oracle: byte comparison of re-serialized output. A thousand random
    /// arrays of random dtype/shape must survive save -> load -> save
    /// bit-identically.
    #[test]
    fn random_arrays_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut arrays = Vec::new();
        for i in 0..1000 {
            let ndim = rng.random_range(0..=3usize);
            let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(0..6usize)).collect();
            let n: usize = shape.iter().product();
            let data = match rng.random_range(0..3u32) {
                0 => ArrayData::F32((0..n).map(|_| rng.random_range(-1e6..1e6f32)).collect()),
                1 => ArrayData::F64((0..n).map(|_| rng.random_range(-1e12..1e12f64)).collect()),
                _ => ArrayData::I64((0..n).map(|_| rng.random_range(i64::MIN..i64::MAX)).collect()),
            };
            arrays.push(NamedArray { name: format!("arr{i}"), shape, data });
        }
        let meta = json!({"format_kind": "dataset", "note": "random", "pi": 3.141592653589793});
        let p1 = tmp("rand1.zdc1");
        let p2 = tmp("rand2.zdc1");
        write_container(&p1, &meta, &arrays).unwrap();
        let loaded = read_container(&p1).unwrap();
        assert_eq!(loaded.metadata, meta);
        assert_eq!(loaded.arrays, arrays);
        write_container(&p2, &loaded.metadata, &loaded.arrays).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn offsets_relative_to_after_newline() {
        let path = tmp("offsets.zdc1");
        let arrays = vec![
            NamedArray::f32("a", vec![2], vec![1.0, 2.0]),
            NamedArray::i64("b", vec![1], vec![-1]),
        ];
        write_container(&path, &json!({}), &arrays).unwrap();
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload = &bytes[nl + 1..];
        assert_eq!(payload.len(), 8 + 8);
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), 2.0);
        assert_eq!(i64::from_le_bytes(payload[8..16].try_into().unwrap()), -1);
    }
}
