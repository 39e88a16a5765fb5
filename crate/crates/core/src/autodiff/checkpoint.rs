//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CDRL" | version u16 | tensor count u32 | descriptor len u32 | descriptor (UTF-8 JSON)
//! per tensor: name len u32 | name (UTF-8) | rank u32 | extents u64 × rank | values f64 × numel
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDRL";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form architecture descriptor, conventionally JSON.
    pub descriptor: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Checkpoint {
            descriptor: descriptor.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let plain = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        self.tensors.push((name.into(), plain));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        write_str(w, &self.descriptor)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let ck = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(ck)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let descriptor = read_str(r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = u32::from_le_bytes(read_array(r)?) as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u64::from_le_bytes(read_array(r)?);
                shape.push(usize::try_from(e).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { descriptor, tensors })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}
