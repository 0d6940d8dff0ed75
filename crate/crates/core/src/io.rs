//! Little-endian binary containers for weight sets and datasets.
//!
//! Layout: 4-byte magic, `u32` version, `u32` matrix count, then per matrix a
//! presence byte and, when present, `u64` rows, `u64` cols and the row-major
//! `f64` entries.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::WeightSet;
use crate::numerics::Matrix;

const WEIGHTS_MAGIC: &[u8; 4] = b"FACW";
const DATASET_MAGIC: &[u8; 4] = b"FACD";
const VERSION: u32 = 1;

fn encode(magic: &[u8; 4], mats: &[Option<&Matrix>]) -> Vec<u8> {
    let floats: usize = mats.iter().flatten().map(|m| m.as_slice().len()).sum();
    let mut out = Vec::with_capacity(12 + mats.len() * 17 + floats * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in mats {
        match m {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Option<Matrix>>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut mats = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        match r.take(1)?[0] {
            0 => mats.push(None),
            1 => {
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let len = rows
                    .checked_mul(cols)
                    .filter(|l| l.checked_mul(8).is_some())
                    .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
                let raw = r.take(len * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                mats.push(Some(Matrix::from_vec(rows, cols, data)?));
            }
            b => return Err(Error::Format(format!("bad presence byte {b}"))),
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(mats)
}

pub fn encode_weights(w: &WeightSet) -> Vec<u8> {
    let mats: Vec<Option<&Matrix>> = (0..w.depth()).map(|l| w.get(l).ok()).collect();
    encode(WEIGHTS_MAGIC, &mats)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightSet> {
    Ok(WeightSet::from_partial(decode(WEIGHTS_MAGIC, bytes)?))
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    encode(DATASET_MAGIC, &[Some(&d.features), Some(&d.labels)])
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    match <[Option<Matrix>; 2]>::try_from(decode(DATASET_MAGIC, bytes)?) {
        Ok([Some(features), Some(labels)]) => Dataset::new(features, labels),
        _ => Err(Error::Format("dataset container needs exactly features and labels".into())),
    }
}

pub fn write_weights(path: impl AsRef<Path>, w: &WeightSet) -> Result<()> {
    Ok(fs::write(path, encode_weights(w))?)
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    decode_weights(&fs::read(path)?)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_dataset(d))?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
