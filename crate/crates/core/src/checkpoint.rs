//! `BNCK` checkpoint container.
//!
//! Layout (little-endian): magic `BNCK`, version u32, stage tag u8,
//! iteration u64, seed u64, tensor count u32, then per tensor: name length
//! u16, UTF-8 name, ndim u8, dims u32 × ndim, f32 data.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BNCK";
pub const VERSION: u32 = 1;

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageTag {
    None = 0,
    Stage1 = 1,
    Stage2 = 2,
}

impl StageTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(StageTag::None),
            1 => Some(StageTag::Stage1),
            2 => Some(StageTag::Stage2),
            _ => None,
        }
    }
}

/// Ordered map of named tensors plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub iteration: u64,
    pub seed: u64,
    tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: StageTag, iteration: u64, seed: u64) -> Self {
        Checkpoint { stage, iteration, seed, tensors: IndexMap::new() }
    }

    /// Inserts (or replaces) a tensor; gradient state is dropped.
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        let clean = Tensor::new(t.shape(), t.data().to_vec()).unwrap();
        self.tensors.insert(name.into(), clean);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Keeps the tensors under `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Checkpoint {
        let mut out = Checkpoint::new(self.stage, self.iteration, self.seed);
        for (k, v) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.tensors.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    /// Copies all tensors of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.stage as u8])?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(nb)?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| Error::Contract(format!("tensor `{name}` has too many dims")))?;
            w.write_all(&[ndim])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut r = Counting { inner: r, offset: 0 };
        let mut magic = [0u8; 4];
        r.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let tag = r.u8()?;
        let stage = StageTag::from_u8(tag).ok_or(Error::Format {
            offset: 8,
            msg: format!("bad stage tag {tag}"),
        })?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut ck = Checkpoint::new(stage, iteration, seed);
        for _ in 0..count {
            let at = r.offset;
            let len = r.u16()? as usize;
            let mut nb = vec![0u8; len];
            r.fill(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::Format { offset: at, msg: "tensor name is not UTF-8".into() })?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            let data_at = r.offset;
            r.fill(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
                offset: data_at,
                msg: format!("tensor `{name}`: {e}"),
            })?;
            if ck.tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format { offset: at, msg: format!("duplicate tensor `{name}`") });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("bnck.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }

    /// SHA-256 of the serialized bytes, hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Counting<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Counting<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated: needed {} more bytes", buf.len()),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}
