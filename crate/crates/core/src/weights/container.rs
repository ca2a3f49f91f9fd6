// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader and writer for the safetensors container layout.
//!
//! Layout: `u64` little-endian header length `n`, then `n` bytes of UTF-8 JSON
//! mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian tensor bytes. Offsets are relative to the start of that byte
//! buffer. An optional `__metadata__` entry holds string key/value pairs.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::WeightError;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// One decoded tensor. F16 payloads are widened to `f32`; `dtype` records
/// what was stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl RawTensor {
    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            dtype: Dtype::F32,
            shape,
            values,
        }
    }
}

/// Name → tensor table plus the container's free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    pub tensors: BTreeMap<String, RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorTable {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: RawTensor) {
        self.tensors.insert(name.into(), tensor);
    }
}

/// Header entries in file order, keeping duplicates so they can be rejected.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(HeaderEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
struct Descriptor {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

struct Located {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

/// Parses a safetensors byte stream into a [`TensorTable`].
pub fn parse_weight_file(bytes: &[u8]) -> Result<TensorTable, WeightError> {
    let malformed = |msg: String| WeightError::MalformedHeader(msg);
    if bytes.len() < 8 {
        return Err(malformed(format!("file is {} bytes, shorter than the length prefix", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(malformed(format!(
            "header length {header_len} exceeds the {available} bytes that follow"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let entries: HeaderEntries = serde_json::from_str(header.trim_end())
        .map_err(|e| malformed(format!("header is not a JSON object: {e}")))?;
    let buffer = &bytes[header_end..];

    let mut table = TensorTable::default();
    let mut located: Vec<Located> = Vec::with_capacity(entries.0.len());
    let mut seen = std::collections::BTreeSet::new();
    for (name, value) in entries.0 {
        if !seen.insert(name.clone()) {
            return Err(WeightError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            table.metadata = serde_json::from_value(value)
                .map_err(|e| malformed(format!("__metadata__ must map strings to strings: {e}")))?;
            continue;
        }
        let desc: Descriptor = serde_json::from_value(value)
            .map_err(|e| malformed(format!("descriptor for {name:?}: {e}")))?;
        let dtype = Dtype::parse(&desc.dtype).ok_or_else(|| WeightError::UnsupportedDtype {
            name: name.clone(),
            dtype: desc.dtype.clone(),
        })?;
        let [begin, end] = desc.data_offsets;
        let numel = desc
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("shape of {name:?} overflows")))?;
        let expected = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| malformed(format!("byte size of {name:?} overflows")))?;
        if begin > end || end > buffer.len() {
            return Err(WeightError::OffsetOutOfBounds {
                name,
                begin,
                end,
                buffer_len: buffer.len(),
            });
        }
        if end - begin != expected {
            return Err(malformed(format!(
                "{name:?} spans {} bytes but shape {:?} needs {expected}",
                end - begin,
                desc.shape
            )));
        }
        located.push(Located {
            name,
            dtype,
            shape: desc.shape,
            begin,
            end,
        });
    }

    // All offsets are valid at this point; decode.
    for loc in located {
        let raw = &buffer[loc.begin..loc.end];
        let values = match loc.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        table.tensors.insert(
            loc.name,
            RawTensor {
                dtype: loc.dtype,
                shape: loc.shape,
                values,
            },
        );
    }
    Ok(table)
}

/// Serializes a table as F32 safetensors, tensors in name order.
pub fn serialize_table(table: &TensorTable) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, tensor) in &table.tensors {
        let begin = payload.len();
        for v in &tensor.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": tensor.shape,
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    if !table.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&table.metadata).expect("string map"),
        );
    }
    let mut text = serde_json::to_vec(&Value::Object(header)).expect("header json");
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + payload.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&payload);
    out
}
