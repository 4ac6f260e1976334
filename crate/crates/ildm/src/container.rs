//! The on-disk tensor container used for dataset shards and checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "ILDMTNSR" | version u32 | entry count u32 | entries...
//! entry:
//!   name len u16 | name utf-8 | dtype u8 (1 = f32, 2 = u8) | rank u8
//!   | dims u32 each | payload (row-major, f32 little-endian)
//!
//! f32 payloads round-trip bit-exactly. Writers are atomic (temp + rename)
//! and byte-deterministic for a fixed entry sequence.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ILDMTNSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// Ordered collection of named tensors. Entry order is part of the byte
/// format, so writers must push in a deterministic order.
#[derive(Clone, Debug, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push_entry(&mut self, name: &str, dims: &[usize], payload: Payload) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("duplicate container entry {name:?}")));
        }
        let want: usize = dims.iter().product();
        if want != payload.len() {
            return Err(Error::contract(format!(
                "entry {name:?}: dims {dims:?} want {want} elements, got {}",
                payload.len()
            )));
        }
        self.entries.push(Entry { name: name.to_string(), dims: dims.to_vec(), payload });
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<()> {
        self.push_entry(name, dims, Payload::F32(data))
    }

    pub fn push_u8(&mut self, name: &str, dims: &[usize], data: Vec<u8>) -> Result<()> {
        self.push_entry(name, dims, Payload::U8(data))
    }

    pub fn push_scalar(&mut self, name: &str, v: f32) -> Result<()> {
        self.push_f32(name, &[1], vec![v])
    }

    /// f64 stored bit-exactly as 8 little-endian bytes.
    pub fn push_f64_bits(&mut self, name: &str, v: f64) -> Result<()> {
        self.push_u8(name, &[8], v.to_le_bytes().to_vec())
    }

    pub fn get_f64_bits(&self, name: &str) -> Result<f64> {
        let (_, b) = self.get_u8(name)?;
        if b.len() != 8 {
            return Err(Error::contract(format!("entry {name:?} is not an f64 payload")));
        }
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn find(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::contract(format!("container missing entry {name:?}")))
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let e = self.find(name)?;
        match &e.payload {
            Payload::F32(v) => Ok((&e.dims, v)),
            _ => Err(Error::contract(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let e = self.find(name)?;
        match &e.payload {
            Payload::U8(v) => Ok((&e.dims, v)),
            _ => Err(Error::contract(format!("entry {name:?} is not u8"))),
        }
    }

    pub fn get_scalar(&self, name: &str) -> Result<f32> {
        let (dims, v) = self.get_f32(name)?;
        if v.len() != 1 {
            return Err(Error::contract(format!("entry {name:?} is not a scalar, dims {dims:?}")));
        }
        Ok(v[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.dtype_tag());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Container> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::io(path, format!("truncated at byte offset {}", *off)));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 8)?;
        if magic != MAGIC {
            return Err(Error::io(path, "bad magic bytes at offset 0"));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::io(path, format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::io(path, format!("entry name is not utf-8 at offset {off}")))?;
            let dtype = take(&mut off, 1)?[0];
            let rank = take(&mut off, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = match dtype {
                1 => {
                    let raw = take(&mut off, numel * 4)?;
                    let v = raw
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Payload::F32(v)
                }
                2 => Payload::U8(take(&mut off, numel)?.to_vec()),
                _ => {
                    return Err(Error::io(path, format!("unknown dtype tag {dtype} at offset {off}")))
                }
            };
            c.push_entry(&name, &dims, payload)
                .map_err(|e| Error::io(path, format!("invalid entry {name:?}: {e}")))?;
        }
        if off != bytes.len() {
            return Err(Error::io(path, format!("{} trailing bytes after offset {off}", bytes.len() - off)));
        }
        Ok(c)
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
        Container::from_bytes(&bytes, &path.display().to_string())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let disp = path.display().to_string();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(disp.clone(), e.to_string()))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(disp, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn empty_container_roundtrip() {
        let c = Container::new();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), 16); // header only
        let back = Container::from_bytes(&bytes, "mem").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut rng = Rng::new(1);
        let mut c = Container::new();
        let mut data = vec![0.0f32; 24];
        rng.fill_normal_f32(&mut data);
        c.push_f32("weights/w0", &[2, 3, 4], data.clone()).unwrap();
        c.push_u8("captions", &[2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        c.push_scalar("meta/lr", 2e-4).unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let (dims, w) = back.get_f32("weights/w0").unwrap();
        assert_eq!(dims, &[2, 3, 4]);
        // bitwise lossless
        for (a, b) in w.iter().zip(data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut c = Container::new();
        c.push_f32("t", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = c.to_bytes();
        let e = Container::from_bytes(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        assert_eq!(e.category(), "io");
        assert!(e.to_string().contains("byte offset"), "{e}");
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut c = Container::new();
        c.push_scalar("x", 1.0).unwrap();
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes, "mem").is_err());
        let mut bytes = c.to_bytes();
        bytes[8] = 99;
        let e = Container::from_bytes(&bytes, "mem").unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        c.push_scalar("x", 1.0).unwrap();
        assert!(c.push_scalar("x", 2.0).is_err());
    }

    #[test]
    fn nan_and_inf_payloads_roundtrip_bitwise() {
        let vals = vec![f32::NAN, f32::INFINITY, f32::NEG_INFINITY, -0.0];
        let mut c = Container::new();
        c.push_f32("odd", &[4], vals.clone()).unwrap();
        let back = Container::from_bytes(&c.to_bytes(), "mem").unwrap();
        let (_, v) = back.get_f32("odd").unwrap();
        for (a, b) in v.iter().zip(vals.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
