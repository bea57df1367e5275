//! Self-describing binary checkpoint container.
//!
//! Layout, byte-exact:
//!
//! ```text
//! bytes 0..4    magic "PZM1"
//! bytes 4..8    header_len: u32 little-endian
//! bytes 8..8+header_len
//!               UTF-8 JSON header, space-padded at the end so the payload
//!               starts on a 64-byte file offset (no padding when there are
//!               no tensors)
//! remainder     payload: raw little-endian tensor bytes; every tensor's
//!               offset (relative to the payload start) is 64-byte aligned,
//!               gaps are zero
//! ```
//!
//! Header JSON: `{"format_version":1,"tensors":[{"name","dtype","shape",
//! "byte_offset","byte_len"}...],"metadata":{...}}` with `byte_offset`
//! relative to the payload start. Dtypes: `f32`, `bf16`, `pbf16` (packed
//! expert pairs), and `q{bits}g{group}` (bit-packed quantization codes,
//! `byte_len = ceil(elements*bits/8)`).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PZM1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Bf16(Vec<u16>),
    Pbf16(Vec<u16>),
    /// Bit-packed quantization codes, LSB-first within each byte.
    Quant {
        bits: u32,
        group: u32,
        raw: Vec<u8>,
    },
}

impl TensorData {
    pub fn dtype_name(&self) -> String {
        match self {
            TensorData::F32(_) => "f32".into(),
            TensorData::Bf16(_) => "bf16".into(),
            TensorData::Pbf16(_) => "pbf16".into(),
            TensorData::Quant { bits, group, .. } => format!("q{bits}g{group}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    fn expected_byte_len(elements: usize, dtype: &ParsedDtype) -> u64 {
        match dtype {
            ParsedDtype::F32 => 4 * elements as u64,
            ParsedDtype::Bf16 | ParsedDtype::Pbf16 => 2 * elements as u64,
            ParsedDtype::Quant { bits, .. } => ((elements as u64) * (*bits as u64)).div_ceil(8),
        }
    }

    fn byte_len(&self) -> u64 {
        match &self.data {
            TensorData::F32(v) => 4 * v.len() as u64,
            TensorData::Bf16(v) | TensorData::Pbf16(v) => 2 * v.len() as u64,
            TensorData::Quant { raw, .. } => raw.len() as u64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tensors: Vec<HeaderTensor>,
    metadata: serde_json::Value,
}

enum ParsedDtype {
    F32,
    Bf16,
    Pbf16,
    Quant { bits: u32, group: u32 },
}

fn parse_dtype(s: &str) -> Result<ParsedDtype> {
    match s {
        "f32" => return Ok(ParsedDtype::F32),
        "bf16" => return Ok(ParsedDtype::Bf16),
        "pbf16" => return Ok(ParsedDtype::Pbf16),
        _ => {}
    }
    if let Some(rest) = s.strip_prefix('q') {
        if let Some((bits, group)) = rest.split_once('g') {
            if let (Ok(bits), Ok(group)) = (bits.parse::<u32>(), group.parse::<u32>()) {
                if (2..=16).contains(&bits) && group >= 1 {
                    return Ok(ParsedDtype::Quant { bits, group });
                }
            }
        }
    }
    Err(Error::CorruptHeader(format!("unknown dtype {s:?}")))
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn check_names(&self) -> Result<()> {
        let mut names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        for w in names.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateName(w[0].to_string()));
            }
        }
        Ok(())
    }

    /// Serialize to bytes. Deterministic: identical containers produce
    /// identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_names()?;
        let mut offset = 0u64;
        let mut header_tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let dtype = t.data.dtype_name();
            let byte_len = t.byte_len();
            let expected = TensorEntry::expected_byte_len(t.elements(), &parse_dtype(&dtype)?);
            assert_eq!(
                byte_len, expected,
                "tensor {} data length does not match its shape",
                t.name
            );
            offset = align_up(offset);
            header_tensors.push(HeaderTensor {
                name: t.name.clone(),
                dtype,
                shape: t.shape.clone(),
                byte_offset: offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            tensors: header_tensors,
            metadata: self.metadata.clone(),
        };
        let mut header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::CorruptHeader(format!("header serialization: {e}")))?;
        if !self.tensors.is_empty() {
            // Space-pad so the payload begins on a 64-byte file offset.
            let body_start = 8 + header_json.len() as u64;
            let padded = align_up(body_start);
            header_json.resize(header_json.len() + (padded - body_start) as usize, b' ');
        }

        let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        let payload_base = out.len() as u64;
        for (t, ht) in self.tensors.iter().zip(&header.tensors) {
            let want = payload_base + ht.byte_offset;
            out.resize(want as usize, 0);
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::Bf16(v) | TensorData::Pbf16(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::Quant { raw, .. } => out.extend_from_slice(raw),
            }
        }
        Ok(out)
    }

    /// Parse a container from bytes, validating structure and payload bounds.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::CorruptHeader("file shorter than 8 bytes".into()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CorruptHeader("header_len exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::CorruptHeader(format!("header JSON: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CorruptHeader(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let payload = &bytes[header_end..];

        let mut names = std::collections::HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for ht in &header.tensors {
            if !names.insert(ht.name.as_str()) {
                return Err(Error::DuplicateName(ht.name.clone()));
            }
            let dtype = parse_dtype(&ht.dtype)?;
            let elements: usize = ht.shape.iter().product();
            let expected = TensorEntry::expected_byte_len(elements, &dtype);
            if expected != ht.byte_len {
                return Err(Error::CorruptHeader(format!(
                    "tensor {} declares {} bytes but shape/dtype imply {}",
                    ht.name, ht.byte_len, expected
                )));
            }
            let end = ht.byte_offset.checked_add(ht.byte_len).ok_or_else(|| {
                Error::CorruptHeader(format!("tensor {} offset overflow", ht.name))
            })?;
            if end > payload.len() as u64 {
                return Err(Error::TruncatedPayload {
                    name: ht.name.clone(),
                    offset: ht.byte_offset,
                    end,
                    available: payload.len() as u64,
                });
            }
            spans.push((ht.byte_offset, end, &ht.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::CorruptHeader(format!(
                    "tensors {} and {} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        let declared_end = spans.last().map_or(0, |s| s.1);
        if payload.len() as u64 != declared_end {
            return Err(Error::CorruptHeader(format!(
                "payload has {} bytes but tensors end at {}",
                payload.len(),
                declared_end
            )));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for ht in &header.tensors {
            let dtype = parse_dtype(&ht.dtype)?;
            let start = ht.byte_offset as usize;
            let raw = &payload[start..start + ht.byte_len as usize];
            let data = match dtype {
                ParsedDtype::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                ParsedDtype::Bf16 => TensorData::Bf16(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                ParsedDtype::Pbf16 => TensorData::Pbf16(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                ParsedDtype::Quant { bits, group } => TensorData::Quant {
                    bits,
                    group,
                    raw: raw.to_vec(),
                },
            };
            tensors.push(TensorEntry {
                name: ht.name.clone(),
                shape: ht.shape.clone(),
                data,
            });
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Write a container to a file.
pub fn write_container(c: &Container, path: impl AsRef<Path>) -> Result<()> {
    c.write(path)
}

/// Read a container from a file.
pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::read(path)
}
