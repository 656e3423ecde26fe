//! Single-file checkpoint container.
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][payload]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype":"F32","shape":[..],"data_offsets":[begin,end]}` with offsets
//! relative to the payload start, plus a reserved `"__metadata__"` object of
//! string values that always carries the checkpoint `"id"` (and `"base_id"`
//! for delta files). The payload is raw little-endian `f32` data.
//!
//! Writing is canonical: metadata first, then tensors in lexicographic order
//! with ascending contiguous offsets, the header padded with spaces to a
//! multiple of 8 bytes. The same tensors therefore always produce the same
//! bytes, and the SHA-256 of those bytes serves as the content digest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DeltaSet, ElementKind, Tensor, TensorMap};

pub const METADATA_KEY: &str = "__metadata__";
const ID_KEY: &str = "id";
const BASE_ID_KEY: &str = "base_id";

/// SHA-256 of a checkpoint's canonical bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s)
            .ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// A decoded file: tensors plus every metadata entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: TensorMap,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn base_id(&self) -> Option<&str> {
        self.metadata.get(BASE_ID_KEY).map(String::as_str)
    }
}

fn encode_with_metadata(t: &TensorMap, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = String::from("{");
    header.push_str(&serde_json::to_string(METADATA_KEY).expect("string"));
    header.push(':');
    header.push_str(&serde_json::to_string(metadata).expect("string map"));
    let mut offset = 0u64;
    let width = t.element_kind().size_in_bytes() as u64;
    for (name, tensor) in t {
        let end = offset + width * tensor.len() as u64;
        header.push(',');
        header.push_str(&serde_json::to_string(name).expect("string"));
        header.push_str(&format!(
            r#":{{"dtype":"{}","shape":{},"data_offsets":[{},{}]}}"#,
            t.element_kind().tag(),
            serde_json::to_string(tensor.shape()).expect("shape"),
            offset,
            end
        ));
        offset = end;
    }
    header.push('}');
    while header.len() % 8 != 0 {
        header.push(' ');
    }

    let mut bytes = Vec::with_capacity(8 + header.len() + offset as usize);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, tensor) in t {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Canonical bytes of a plain checkpoint.
pub fn encode(t: &TensorMap) -> Vec<u8> {
    let metadata = BTreeMap::from([(ID_KEY.to_string(), t.id().to_string())]);
    encode_with_metadata(t, &metadata)
}

/// Canonical bytes of a delta checkpoint (records the base identity).
pub fn encode_delta(d: &DeltaSet) -> Vec<u8> {
    let metadata = BTreeMap::from([
        (ID_KEY.to_string(), d.tensors().id().to_string()),
        (BASE_ID_KEY.to_string(), d.base_id().to_string()),
    ]);
    encode_with_metadata(d.tensors(), &metadata)
}

pub fn digest_of(t: &TensorMap) -> Digest {
    Digest::of_bytes(&encode(t))
}

pub fn digest_of_delta(d: &DeltaSet) -> Digest {
    Digest::of_bytes(&encode_delta(d))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_entry(name: &str, value: &Value) -> Result<Entry> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("entry `{name}` is not an object")))?;
    if let Some(key) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets"))
    {
        return Err(malformed(format!("entry `{name}` has unknown field `{key}`")));
    }
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a string dtype")))?;
    if ElementKind::from_tag(dtype).is_none() {
        return Err(Error::UnsupportedDtype {
            name: name.to_string(),
            dtype: dtype.to_string(),
        });
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a shape list")))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| malformed(format!("entry `{name}` has a non-integer dimension")))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| malformed(format!("entry `{name}` needs data_offsets [begin, end]")))?;
    let (begin, end) = offsets;
    if begin > end {
        return Err(malformed(format!("entry `{name}` has begin > end")));
    }
    let expected = shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| malformed(format!("entry `{name}` shape overflows")))?;
    if end - begin != expected {
        return Err(Error::ByteSizeMismatch {
            name: name.to_string(),
            shape,
            bytes: end - begin,
            expected,
        });
    }
    Ok(Entry {
        name: name.to_string(),
        shape,
        begin,
        end,
    })
}

/// Parses and validates a complete file image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let available = bytes.len() as u64;
    if available < 8 {
        return Err(Error::Truncated {
            needed: 8,
            available,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let payload_start = 8u64
        .checked_add(header_len)
        .filter(|&n| n <= available)
        .ok_or(Error::Truncated {
            needed: 8u64.saturating_add(header_len),
            available,
        })?;
    let header = std::str::from_utf8(&bytes[8..payload_start as usize])
        .map_err(|e| malformed(format!("not UTF-8: {e}")))?;
    let root: Value =
        serde_json::from_str(header).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let root = root
        .as_object()
        .ok_or_else(|| malformed("header is not a JSON object"))?;

    let metadata: BTreeMap<String, String> = match root.get(METADATA_KEY) {
        Some(Value::Object(m)) => m
            .iter()
            .map(|(k, v)| {
                v.as_str()
                    .map(|s| (k.clone(), s.to_string()))
                    .ok_or_else(|| malformed(format!("metadata `{k}` is not a string")))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(malformed("__metadata__ is not an object")),
        None => return Err(malformed("missing __metadata__")),
    };
    let id = metadata
        .get(ID_KEY)
        .ok_or_else(|| malformed("__metadata__ has no id"))?
        .clone();

    let mut entries = root
        .iter()
        .filter(|(k, _)| k.as_str() != METADATA_KEY)
        .map(|(k, v)| parse_entry(k, v))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| (a.begin, a.end, &a.name).cmp(&(b.begin, b.end, &b.name)));

    let payload_len = available - payload_start;
    let mut cursor = 0u64;
    let mut previous: Option<&str> = None;
    for e in &entries {
        if e.begin < cursor {
            return Err(Error::OffsetOverlap {
                first: previous.unwrap_or_default().to_string(),
                second: e.name.clone(),
            });
        }
        if e.begin > cursor {
            return Err(Error::OffsetGap {
                begin: cursor,
                end: e.begin,
            });
        }
        cursor = e.end;
        previous = Some(&e.name);
    }
    if cursor > payload_len {
        return Err(Error::Truncated {
            needed: payload_start + cursor,
            available,
        });
    }
    if cursor < payload_len {
        return Err(Error::OffsetGap {
            begin: cursor,
            end: payload_len,
        });
    }

    let payload = &bytes[payload_start as usize..];
    let mut tensors = TensorMap::new(id);
    for e in entries {
        let data = payload[e.begin as usize..e.end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&e.name, e.shape, data)?;
        tensors.insert(e.name, tensor);
    }
    Ok(Checkpoint { tensors, metadata })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<Digest> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(Digest::of_bytes(bytes))
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&read_file(path.as_ref())?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    Ok(read_checkpoint_file(path)?.tensors)
}

/// Writes the canonical encoding and returns the digest of the file bytes.
pub fn write_checkpoint(t: &TensorMap, path: impl AsRef<Path>) -> Result<Digest> {
    write_file(path.as_ref(), &encode(t))
}

pub fn read_delta(path: impl AsRef<Path>) -> Result<DeltaSet> {
    let ckpt = read_checkpoint_file(path)?;
    let base_id = ckpt
        .base_id()
        .ok_or_else(|| malformed("delta file has no base_id in __metadata__"))?
        .to_string();
    Ok(DeltaSet::new(base_id, ckpt.tensors))
}

pub fn write_delta(d: &DeltaSet, path: impl AsRef<Path>) -> Result<Digest> {
    write_file(path.as_ref(), &encode_delta(d))
}
