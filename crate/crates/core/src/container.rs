//! Raw binary array storage shared by scene containers and checkpoints.
//!
//! Each array lives in its own file of little-endian values next to a JSON
//! manifest entry carrying name, dtype, shape, file name, and a CRC32 of the
//! bytes. Readers verify length and checksum before returning data, so a
//! flipped byte or truncated file surfaces as a named error instead of
//! silently corrupt training input.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Array payload. Scene containers use f32/i32; checkpoints additionally
/// store f64 parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::I32(_) => "i32",
            ArrayData::F64(_) => "f64",
        }
    }

    fn elem_size(dtype: &str) -> Result<usize> {
        match dtype {
            "f32" | "i32" => Ok(4),
            "f64" => Ok(8),
            other => Err(Error::Contract(format!("unknown array dtype {other:?}"))),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: &str, bytes: &[u8]) -> Result<ArrayData> {
        let parse4 = |b: &[u8]| -> [u8; 4] { [b[0], b[1], b[2], b[3]] };
        match dtype {
            "f32" => Ok(ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(parse4(c))).collect(),
            )),
            "i32" => Ok(ArrayData::I32(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(parse4(c))).collect(),
            )),
            "f64" => Ok(ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            )),
            other => Err(Error::Contract(format!("unknown array dtype {other:?}"))),
        }
    }
}

/// Manifest record for one stored array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub crc32: u32,
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Contract(format!("array shape {shape:?} overflows")))?;
    }
    Ok(n)
}

/// Write one array file into `dir` and return its manifest entry. The file
/// is named `{name}.bin`.
pub fn write_array(dir: &Path, name: &str, shape: &[usize], data: &ArrayData) -> Result<ArrayEntry> {
    let expected = shape_len(shape)?;
    if expected != data.len() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            actual: vec![data.len()],
        });
    }
    let bytes = data.to_le_bytes();
    let crc = crc32fast::hash(&bytes);
    let file = format!("{name}.bin");
    fs::write(dir.join(&file), &bytes)?;
    Ok(ArrayEntry {
        name: name.to_string(),
        dtype: data.dtype().to_string(),
        shape: shape.to_vec(),
        file,
        crc32: crc,
    })
}

/// Read and verify one array against its manifest entry.
pub fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<ArrayData> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    let elem = ArrayData::elem_size(&entry.dtype)?;
    let expected = shape_len(&entry.shape)?;
    if bytes.len() != expected * elem {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            expected: entry.shape.clone(),
            actual: vec![bytes.len() / elem],
        });
    }
    let crc = crc32fast::hash(&bytes);
    if crc != entry.crc32 {
        return Err(Error::ChecksumMismatch {
            name: entry.name.clone(),
        });
    }
    ArrayData::from_le_bytes(&entry.dtype, &bytes)
}

/// Find a required array entry by name.
pub fn find_entry<'a>(entries: &'a [ArrayEntry], name: &str) -> Result<&'a ArrayEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::MissingArray(name.to_string()))
}

/// Convenience accessors that also enforce dtype.
pub fn expect_f32(data: ArrayData, name: &str) -> Result<Vec<f32>> {
    match data {
        ArrayData::F32(v) => Ok(v),
        other => Err(Error::Contract(format!(
            "array {name:?} has dtype {}, expected f32",
            other.dtype()
        ))),
    }
}

pub fn expect_i32(data: ArrayData, name: &str) -> Result<Vec<i32>> {
    match data {
        ArrayData::I32(v) => Ok(v),
        other => Err(Error::Contract(format!(
            "array {name:?} has dtype {}, expected i32",
            other.dtype()
        ))),
    }
}

pub fn expect_f64(data: ArrayData, name: &str) -> Result<Vec<f64>> {
    match data {
        ArrayData::F64(v) => Ok(v),
        other => Err(Error::Contract(format!(
            "array {name:?} has dtype {}, expected f64",
            other.dtype()
        ))),
    }
}
