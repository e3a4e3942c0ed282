//! `DQV1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DQV1"
//! u32 tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DQV1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![], vec![value])
    }

    pub fn from_vector(name: impl Into<String>, v: &DVector<f64>) -> Self {
        Self::new(name, vec![v.len()], v.as_slice().to_vec())
    }

    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
        Self::new(name, vec![m.nrows(), m.ncols()], data)
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        match self.shape.as_slice() {
            &[_] => Ok(DVector::from_column_slice(&self.data)),
            other => Err(Error::Checkpoint(format!("`{}` has shape {other:?}, expected a vector", self.name))),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            &[r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            other => Err(Error::Checkpoint(format!("`{}` has shape {other:?}, expected a matrix", self.name))),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match self.data.as_slice() {
            &[v] => Ok(v),
            _ => Err(Error::Checkpoint(format!("`{}` is not a scalar", self.name))),
        }
    }

    pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected DQV1".into()));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(tensors)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
