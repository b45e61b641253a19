//! Container for numeric arrays on disk: one JSON header line, then the raw
//! little-endian arrays in header order. Replay chunks and checkpoint blobs
//! both use it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeTag {
    U8,
    U32,
    I64,
    F32,
    F64,
}

impl DTypeTag {
    pub fn size(self) -> usize {
        match self {
            DTypeTag::U8 => 1,
            DTypeTag::U32 | DTypeTag::F32 => 4,
            DTypeTag::I64 | DTypeTag::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DTypeTag {
        match self {
            ArrayData::U8(_) => DTypeTag::U8,
            ArrayData::U32(_) => DTypeTag::U32,
            ArrayData::I64(_) => DTypeTag::I64,
            ArrayData::F32(_) => DTypeTag::F32,
            ArrayData::F64(_) => DTypeTag::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DTypeTag, bytes: &[u8]) -> Self {
        fn arr<const N: usize>(c: &[u8]) -> [u8; N] {
            c.try_into().expect("chunk size")
        }
        match dtype {
            DTypeTag::U8 => ArrayData::U8(bytes.to_vec()),
            DTypeTag::U32 => ArrayData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(arr(c))).collect()),
            DTypeTag::I64 => ArrayData::I64(bytes.chunks_exact(8).map(|c| i64::from_le_bytes(arr(c))).collect()),
            DTypeTag::F32 => ArrayData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(arr(c))).collect()),
            DTypeTag::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(arr(c))).collect()),
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
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub names: Vec<String>,
    pub dtypes: Vec<DTypeTag>,
    pub shapes: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(kind: &str, meta: serde_json::Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    for a in arrays {
        let n: usize = a.shape.iter().product();
        if n != a.data.len() {
            return Err(Error::contract(format!(
                "array {} has shape {:?} but {} elements",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        names: arrays.iter().map(|a| a.name.clone()).collect(),
        dtypes: arrays.iter().map(|a| a.data.dtype()).collect(),
        shapes: arrays.iter().map(|a| a.shape.clone()).collect(),
        counts: arrays.iter().map(|a| a.data.len()).collect(),
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for a in arrays {
        a.data.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], kind: &str, path: &Path) -> Result<(Header, Vec<NamedArray>)> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("version {} unsupported (expected {FORMAT_VERSION})", header.version),
        ));
    }
    if header.kind != kind {
        return Err(Error::format(path, format!("kind {:?}, expected {kind:?}", header.kind)));
    }
    let n = header.names.len();
    if header.dtypes.len() != n || header.shapes.len() != n || header.counts.len() != n {
        return Err(Error::format(path, "header field lengths disagree"));
    }
    let mut offset = nl + 1;
    let mut arrays = Vec::with_capacity(n);
    for i in 0..n {
        let count = header.counts[i];
        if header.shapes[i].iter().product::<usize>() != count {
            return Err(Error::format(path, format!("array {} shape/count mismatch", header.names[i])));
        }
        let len = count
            .checked_mul(header.dtypes[i].size())
            .ok_or_else(|| Error::format(path, "array size overflow"))?;
        let end = offset
            .checked_add(len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::format(path, format!("truncated array {}", header.names[i])))?;
        arrays.push(NamedArray {
            name: header.names[i].clone(),
            shape: header.shapes[i].clone(),
            data: ArrayData::read_le(header.dtypes[i], &bytes[offset..end]),
        });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last array"));
    }
    Ok((header, arrays))
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written file.
pub fn write_file(path: &Path, kind: &str, meta: serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(kind, meta, arrays)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path, kind: &str) -> Result<(Header, Vec<NamedArray>)> {
    let bytes = fs::read(path)?;
    decode(&bytes, kind, path)
}

/// Looks up an array by name and checks its dtype.
pub fn take<'a>(arrays: &'a [NamedArray], name: &str, path: &Path) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::format(path, format!("missing array {name}")))
}
