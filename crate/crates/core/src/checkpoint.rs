//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SSOSCKPT"
//! version    u32
//! sections   u32      number of sections
//! per section:
//!   name_len u32, name (utf-8)
//!   ndims    u32, dims (u32 each)
//!   data     f64 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSOSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Result<()> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!("section {name}: dims {dims:?} do not match {} values", data.len())));
        }
        if self.sections.iter().any(|s| s.name == name) {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
        self.sections.push(Section { name, dims, data: data.to_vec() });
        Ok(())
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))
    }

    /// Copies a section into `dst`, checking the element count.
    pub fn read_into(&self, name: &str, dst: &mut [f64]) -> Result<()> {
        let s = self.get(name)?;
        if s.data.len() != dst.len() {
            return Err(Error::Format(format!("section {name}: expected {} values, found {}", dst.len(), s.data.len())));
        }
        dst.copy_from_slice(&s.data);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("section name is not utf-8".into()))?;
            let nd = r.u32()? as usize;
            let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ckpt.push(name, dims, &data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ckpt)
    }

    pub fn names(&self) -> BTreeMap<&str, &[usize]> {
        self.sections.iter().map(|s| (s.name.as_str(), s.dims.as_slice())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
