//! Single-file checkpoint container.
//!
//! ```text
//! "TSPC"  u32 version  u32 manifest_len  manifest (JSON, UTF-8)
//! u32 block_count
//! per block, names in lexicographic order:
//!     u16 name_len  name  u8 ndim  u32 dims[ndim]  f32 data[prod(dims)]
//! u32 CRC-32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ArchConfig;
use crate::nn::{fnv1a, ParamStore};

const MAGIC: &[u8; 4] = b"TSPC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    TrainState,
    Rerenderer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub format_version: u32,
    pub arch: ArchConfig,
    pub stage: usize,
    pub fade_alpha: f64,
    pub step: u64,
    pub config_hash: String,
    /// Kind-specific fields.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            dims: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.dims.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blocks: BTreeMap<String, Block>,
}

impl Checkpoint {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            blocks: BTreeMap::new(),
        }
    }

    pub fn add_params(&mut self, params: &ParamStore) -> Result<()> {
        for (name, var) in params.iter() {
            self.blocks.insert(name.clone(), Block::from_tensor(var.as_tensor())?);
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`, as a fresh store.
    pub fn params_with_prefix(&self, prefix: &str, dtype: DType) -> Result<ParamStore> {
        let mut store = ParamStore::new(dtype);
        for (name, block) in self.blocks.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            store.insert(name.clone(), block.to_tensor(dtype)?)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(manifest.len(), "manifest")?.to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&len_u32(self.blocks.len(), "block count")?.to_le_bytes());
        for (name, block) in &self.blocks {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("block name too long: {name}")))?;
            let expected: usize = block.dims.iter().product();
            if expected != block.data.len() {
                return Err(Error::shape(format!("block {name}: dims {:?} vs {} values", block.dims, block.data.len())));
            }
            let ndim = u8::try_from(block.dims.len()).map_err(|_| Error::invalid("too many dimensions"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in &block.dims {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in &block.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = r.u32()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut blocks = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Corrupt("block name is not UTF-8".into()))?;
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Corrupt(format!("block {name} out of order")));
            }
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Corrupt("block size overflow".into()))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            prev = Some(name.clone());
            blocks.insert(name, Block { dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after last block".into()));
        }
        Ok(Self { manifest, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// FNV-1a of the serialized bytes, as 16 hex digits.
    pub fn content_hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(&self.to_bytes()?)))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} too large: {n}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Manifest {
            kind: CheckpointKind::TrainState,
            format_version: FORMAT_VERSION,
            arch: ArchConfig::default(),
            stage: 2,
            fade_alpha: 0.3,
            step: 17,
            config_hash: "abc".into(),
            extra: serde_json::json!({"x": 1}),
        });
        c.blocks.insert("b".into(), Block { dims: vec![2, 2], data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE] });
        c.blocks.insert("a".into(), Block { dims: vec![], data: vec![0.1] });
        c
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tampering_detected() {
        let bytes = sample().to_bytes().unwrap();
        for i in [5, 20, bytes.len() - 10, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i}");
        }
        let mut bad = bytes.clone();
        bad[bytes.len() - 10] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_mismatch_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    }
}
