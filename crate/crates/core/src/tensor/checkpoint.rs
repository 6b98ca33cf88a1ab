//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "PREF" | version u32 | count u32 |
//!   per tensor: name_len u16 | name utf-8 | dtype u8 | rank u8 | extents u32 × rank | data
//! ```

use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PREF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format("dtype", format!("unknown code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One tensor as stored on disk: raw little-endian bytes plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl CheckpointEntry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.width());
        t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        CheckpointEntry { name: name.to_string(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    /// Decodes into precision `T`, converting if the stored dtype differs.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let w = self.dtype.width();
        let data = self
            .bytes
            .chunks_exact(w)
            .map(|c| match self.dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::format("name", format!("`{}` is longer than 65535 bytes", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::format("rank", format!("`{}` has rank {}", e.name, e.shape.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype as u8);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::format("extent", format!("{d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(field, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"PREF\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let count = r.u32("count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::format("name", e.to_string()))?
            .to_string();
        let dtype = DType::from_code(r.u8("dtype")?)?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.width(), "data")?.to_vec();
        entries.push(CheckpointEntry { name, dtype, shape, bytes });
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes every entry of `store` atomically (temp file + rename).
pub fn write_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let entries: Vec<_> = store.iter().map(|(n, p)| CheckpointEntry::from_tensor(n, &p.tensor)).collect();
    let bytes = encode_checkpoint(&entries)?;
    crate::fsutil::atomic_write(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl<T: Scalar> ParamStore<T> {
    /// Overwrites existing entries with checkpoint tensors. Every entry of
    /// the store must be present with an identical shape.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let names: Vec<String> = self.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))?;
            let t = e.to_tensor::<T>()?;
            let slot = self.tensor_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` is {:?} on disk but {:?} in the model", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode_checkpoint(&[CheckpointEntry::from_tensor("w", &t)]).unwrap();
        let mut want = b"PREF".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.push(0);
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format { .. })));
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let bytes = encode_checkpoint(&[CheckpointEntry::from_tensor("x", &t)]).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn store_round_trip_is_bit_identical() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", Tensor::new(vec![2, 2], vec![0.1, f32::MIN_POSITIVE, -0.0, 1e30]).unwrap(), true);
        s.insert("a.running_var", Tensor::full(&[2], 1.0), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &s).unwrap();
        let entries = read_checkpoint(&path).unwrap();
        let mut loaded = s.clone();
        loaded.tensor_mut("a.weight").unwrap().data_mut().fill(9.0);
        loaded.load_entries(&entries).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(loaded.iter()) {
            let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_checkpoint(&entries).unwrap(), std::fs::read(&path).unwrap());
    }
}
