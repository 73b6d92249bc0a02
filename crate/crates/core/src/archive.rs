//! Binary tensor archive shared by checkpoints and corpus feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "KWSTNSR\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes, canonical JSON (sorted keys)
//! count    u32      number of tensors
//! entries  count × { name_len u32, name, ndim u32, dims u64×ndim, offset u64 }
//! dlen     u64      data section length in bytes
//! data     dlen bytes of f64 values; entry offsets are relative to here
//! ```

use std::path::Path;

use serde_json::Value;

use crate::error::{KwsError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"KWSTNSR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.swap_remove(idx).1)
    }
}

pub fn encode(header: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> KwsError {
        KwsError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt("length overflow"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Archive> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(KwsError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.len()?;
    let header: Value = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.corrupt(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| r.corrupt("tensor name is not utf-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(r.corrupt(format!("tensor `{name}` has {ndim} dims")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.len()?);
        }
        let offset = r.len()?;
        entries.push((name, dims, offset));
    }
    let dlen = r.len()?;
    let data_start = r.pos;
    let data = r.take(dlen)?;
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after data section"));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, dims, offset) in entries {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| r.corrupt("shape overflow"))?;
        let end = offset
            .checked_add(n.checked_mul(8).ok_or_else(|| r.corrupt("shape overflow"))?)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| r.corrupt(format!("tensor `{name}` exceeds data section (starts at {data_start})")))?;
        let values = data[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, values).map_err(|e| r.corrupt(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Archive { header, tensors })
}

pub fn write(path: &Path, header: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(header, tensors)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode(&bytes, path)
}
