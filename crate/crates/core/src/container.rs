//! Reader and writer for the safetensors container.
//!
//! Layout:
//!
//! ```text
//! [0, 8)        header length N, u64 little-endian
//! [8, 8 + N)    UTF-8 JSON header, space padded
//! [8 + N, end)  contiguous data buffer
//! ```
//!
//! Every header entry is `{"dtype", "shape", "data_offsets": [begin, end)}` with
//! offsets relative to the start of the data buffer. An optional
//! `__metadata__` entry holds a flat string map.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F16,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(DType::F16),
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named array: dtype, shape and the raw little-endian row-major bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = numel(&shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if data.len() != expected {
            return Err(Error::InvalidTensor(format!(
                "{} bytes for shape {:?} of {} (expected {})",
                data.len(),
                shape,
                dtype,
                expected
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    /// Encodes `values` in `dtype`. F16 narrowing rounds to nearest.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        if values.len() != numel(&shape) {
            return Err(Error::InvalidTensor(format!(
                "{} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        let mut data = Vec::with_capacity(values.len() * dtype.size());
        match dtype {
            DType::F16 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&f16::from_f64(v).to_le_bytes())),
            DType::F32 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&v.to_le_bytes())),
        }
        Self::new(dtype, shape, data)
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, shape, data)
    }

    /// Row-major encoding of a matrix.
    pub fn from_matrix(dtype: DType, matrix: &DMatrix<f64>) -> Result<Self> {
        let values: Vec<f64> = matrix.transpose().as_slice().to_vec();
        Self::from_f64(dtype, vec![matrix.nrows(), matrix.ncols()], &values)
    }

    /// Zero-length F32 tensor, used as a presence flag.
    pub fn flag() -> Self {
        Self {
            dtype: DType::F32,
            shape: vec![0],
            data: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Decodes every element, widening to f64 (exact for all supported dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self.dtype {
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        }
    }

    /// Interprets a 2-D tensor as a row-major matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape[..] {
            [rows, cols] => Ok(DMatrix::from_row_slice(rows, cols, &self.to_f64_vec())),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Scalar value of a tensor with exactly one element.
    pub fn to_scalar(&self) -> Result<f64> {
        match self.to_f64_vec()[..] {
            [v] => Ok(v),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a single element, got shape {:?}",
                self.shape
            ))),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Ordered collection of named tensors plus optional string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorMap {
    entries: Vec<(String, Tensor)>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor("empty tensor name".into()));
        }
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor(format!("`{METADATA_KEY}` is reserved")));
        }
        if self.get(&name).is_some() {
            return Err(Error::NameCollision(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Builds a map without checking names; `write_container` still validates.
    pub fn from_entries_unchecked(entries: Vec<(String, Tensor)>) -> Self {
        Self {
            entries,
            metadata: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.as_ref()?.get(key).map(String::as_str)
    }

    pub fn insert_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata
            .get_or_insert_with(BTreeMap::new)
            .insert(key.into(), value.into());
    }
}

#[derive(serde::Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parses a container from its full byte image.
pub fn read_container(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "declared header length {header_len} exceeds the {} byte input",
                bytes.len() - 8
            ))
        })?;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: IndexMap<String, Value> = serde_json::from_str(header.trim_end_matches(' '))
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
    let data = &bytes[header_end..];

    let mut metadata = None;
    let mut located = Vec::with_capacity(raw.len());
    for (name, value) in raw {
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("`{METADATA_KEY}` is not a string map: {e}"))
            })?;
            metadata = Some(map);
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry `{name}`: {e}")))?;
        let dtype = DType::parse(&entry.dtype)?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(Error::OverlappingOffsets(format!(
                "`{name}` has reversed offsets [{begin}, {end})"
            )));
        }
        let expected = numel(&entry.shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::InvalidTensor(format!("`{name}` shape overflows")))?;
        if end - begin != expected {
            return Err(Error::InvalidTensor(format!(
                "`{name}` spans {} bytes but shape {:?} of {} needs {}",
                end - begin,
                entry.shape,
                dtype,
                expected
            )));
        }
        located.push((name, dtype, entry.shape, begin, end));
    }

    // Stable sort keeps header order among zero-length tensors sharing an offset.
    located.sort_by_key(|&(_, _, _, begin, end)| (begin, end));
    let mut cursor = 0usize;
    for (name, _, _, begin, end) in &located {
        if *begin != cursor {
            return Err(Error::OverlappingOffsets(format!(
                "`{name}` starts at {begin} but the previous tensor ends at {cursor}"
            )));
        }
        if *end > data.len() {
            return Err(Error::OverlappingOffsets(format!(
                "`{name}` ends at {end} beyond the {} byte data buffer",
                data.len()
            )));
        }
        cursor = *end;
    }
    if cursor != data.len() {
        return Err(Error::OverlappingOffsets(format!(
            "data buffer has {} trailing bytes not covered by any tensor",
            data.len() - cursor
        )));
    }

    let mut map = TensorMap::new();
    for (name, dtype, shape, begin, end) in located {
        map.insert(name, Tensor::new(dtype, shape, data[begin..end].to_vec())?)?;
    }
    map.metadata = metadata;
    Ok(map)
}

/// Serializes a map. Tensors are laid out in iteration order with no gaps and
/// the header lists them in the same order, so the output is byte-deterministic.
pub fn write_container(map: &TensorMap) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in &map.entries {
        if name.is_empty() {
            return Err(Error::InvalidTensor("empty tensor name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::NameCollision(name.clone()));
        }
        if tensor.data.len() != tensor.numel() * tensor.dtype.size() {
            return Err(Error::InvalidTensor(format!("`{name}` data length mismatch")));
        }
    }

    let mut header = String::from("{");
    let mut first = true;
    if let Some(metadata) = &map.metadata {
        header.push_str(&json_string(METADATA_KEY));
        header.push(':');
        header.push_str(&serde_json::to_string(metadata).expect("string map serializes"));
        first = false;
    }
    let mut offset = 0usize;
    for (name, tensor) in &map.entries {
        if !first {
            header.push(',');
        }
        first = false;
        let end = offset + tensor.data.len();
        let shape = tensor
            .shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        header.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_string(name),
            tensor.dtype,
            shape,
            offset,
            end
        ));
        offset = end;
    }
    header.push('}');
    let padded = header.len().div_ceil(8) * 8;
    header.extend(std::iter::repeat_n(' ', padded - header.len()));

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, tensor) in &map.entries {
        out.extend_from_slice(&tensor.data);
    }
    Ok(out)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    read_container(&fs::read(path)?)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_file(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    write_bytes_atomic(path.as_ref(), &write_container(map)?)
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers never observe a partial file.
pub fn write_bytes_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("output path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
