//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MSLCCKPT"
//! version  u32
//! seed     u64
//! count    u32      number of sections
//! section  * count:
//!   name_len u32, name (utf-8)
//!   kind     u8     0 = f64, 1 = u64, 2 = raw bytes
//!   ndims    u32, dims u64 * ndims
//!   payload  product(dims) elements (f64 as IEEE-754 bits, u64, or bytes)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSLCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl SectionData {
    fn len(&self) -> usize {
        match self {
            SectionData::F64(v) => v.len(),
            SectionData::U64(v) => v.len(),
            SectionData::Bytes(v) => v.len(),
        }
    }

    fn kind(&self) -> u8 {
        match self {
            SectionData::F64(_) => 0,
            SectionData::U64(_) => 1,
            SectionData::Bytes(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: SectionData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub seed: u64,
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            sections: Vec::new(),
        }
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: SectionData) -> Result<()> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dim("checkpoint section", expected, data.len()));
        }
        if self.sections.iter().any(|s| s.name == name) {
            return Err(Error::Checkpoint(format!("duplicate section {name}")));
        }
        self.sections.push(Section {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
        self.push(name, dims, SectionData::F64(data.to_vec()))
    }

    pub fn push_u64(&mut self, name: &str, dims: &[usize], data: &[u64]) -> Result<()> {
        self.push(name, dims, SectionData::U64(data.to_vec()))
    }

    pub fn push_bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        self.push(name, &[data.len()], SectionData::Bytes(data.to_vec()))
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.section(name)?.data {
            SectionData::F64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section {name} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.section(name)?.data {
            SectionData::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section {name} is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.section(name)?.data {
            SectionData::Bytes(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section {name} is not bytes"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.data.kind());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &s.data {
                SectionData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
                SectionData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                SectionData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut ck = Checkpoint::new(seed);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("section name is not utf-8".into()))?
                .to_string();
            let kind = r.take(1)?[0];
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Checkpoint(format!("section {name} is too large")))?;
            let data = match kind {
                0 => SectionData::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => SectionData::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                2 => SectionData::Bytes(r.take(n)?.to_vec()),
                k => return Err(Error::Checkpoint(format!("unknown section kind {k}"))),
            };
            let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            ck.push(&name, &dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
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
