//! SMPX: a small named-section binary container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "SMPX"
//! version      u32      currently 1
//! count        u32      number of sections
//! count × header:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   dtype      u8       1 = f64, 2 = u64, 3 = utf-8 text
//!   rank       u8
//!   dims       rank × u64
//!   byte_len   u64      payload length
//!   crc32      u32      CRC-32 (IEEE) of the payload
//! payloads     concatenated in header order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMPX";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U64 = 2,
    Text = 3,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(DType::F64),
            2 => Ok(DType::U64),
            3 => Ok(DType::Text),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::Text => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::f64s(name, t.shape(), t.data())
    }

    pub fn f64s(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            shape: shape.to_vec(),
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn u64s(name: impl Into<String>, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::U64,
            shape: vec![values.len()],
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Self {
            name: name.into(),
            dtype: DType::Text,
            shape: vec![text.len()],
            payload: text.as_bytes().to_vec(),
        }
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Format(format!(
                "section `{}` has dtype {:?}, expected {dtype:?}",
                self.name, self.dtype
            )));
        }
        Ok(())
    }

    pub fn to_f64s(&self) -> Result<Vec<f64>> {
        self.expect(DType::F64)?;
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.to_f64s()?;
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| Error::Format(format!("section `{}`: {e}", self.name)))
    }

    pub fn to_u64s(&self) -> Result<Vec<u64>> {
        self.expect(DType::U64)?;
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn to_text(&self) -> Result<String> {
        self.expect(DType::Text)?;
        String::from_utf8(self.payload.clone())
            .map_err(|_| Error::Format(format!("section `{}` is not valid UTF-8", self.name)))
    }
}

/// An ordered list of uniquely named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, section: Section) -> Result<()> {
        if self.get(&section.name).is_some() {
            return Err(Error::Format(format!("duplicate section `{}`", section.name)));
        }
        if section.name.len() > u16::MAX as usize || section.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("section `{}` header too large", section.name)));
        }
        self.sections.push(section);
        Ok(())
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.dtype as u8);
            out.push(s.shape.len() as u8);
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(&s.payload).to_le_bytes());
        }
        for s in &self.sections {
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_byte(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("length overflow".into()))?;
            let crc = r.u32()?;
            let expected = shape
                .iter()
                .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("section size overflow".into()))?;
            if expected != len {
                return Err(Error::Format(format!(
                    "section `{name}` declares {len} bytes for shape {shape:?}"
                )));
            }
            headers.push((name, dtype, shape, len, crc));
        }
        let mut out = Container::new();
        for (name, dtype, shape, len, crc) in headers {
            let payload = r.take(len)?.to_vec();
            let computed = crc32fast::hash(&payload);
            if computed != crc {
                return Err(Error::Checksum {
                    section: name,
                    stored: crc,
                    computed,
                });
            }
            out.push(Section {
                name,
                dtype,
                shape,
                payload,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last section",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses `key=value` lines; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("malformed metadata line `{l}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push(Section::f64s("w", &[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 3.5])).unwrap();
        c.push(Section::u64s("ids", &[7, u64::MAX])).unwrap();
        c.push(Section::text("meta", "a=1\nb=two\n")).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let w = back.require("w").unwrap().to_f64s().unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.require("ids").unwrap().to_u64s().unwrap(), vec![7, u64::MAX]);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SMPX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], DType::F64 as u8);
        assert_eq!(bytes[16], 2);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(Container::from_bytes(&flipped), Err(Error::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Container::from_bytes(&magic), Err(Error::Format(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Container::from_bytes(&version), Err(Error::Format(_))));

        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn duplicate_and_mistyped_sections() {
        let mut c = sample();
        assert!(c.push(Section::text("meta", "")).is_err());
        assert!(c.require("ids").unwrap().to_f64s().is_err());
        assert!(c.require("missing").is_err());
    }

    #[test]
    fn metadata_pairs() {
        let pairs = parse_pairs("a = 1\n\nb=x=y\n").unwrap();
        assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_pairs("novalue").is_err());
    }
}
