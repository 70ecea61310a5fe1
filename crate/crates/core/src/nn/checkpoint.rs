//! Binary container for weights and training state.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header, then
//! the payload. The header lists every section with its dtype, shape and byte
//! offset into the payload. `f32` sections are stored little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Network};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RPFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub sections: Vec<SectionEntry>,
}

#[derive(Debug, Clone)]
pub struct CheckpointWriter {
    header: Header,
    payload: Vec<u8>,
}

impl CheckpointWriter {
    pub fn new(kind: &str, config_hash: &str, meta: serde_json::Value) -> Self {
        Self {
            header: Header {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                config_hash: config_hash.to_string(),
                meta,
                sections: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, data: &[u8]) {
        self.header.sections.push(SectionEntry {
            name: name.to_string(),
            dtype,
            shape,
            offset: self.payload.len() as u64,
            bytes: data.len() as u64,
        });
        self.payload.extend_from_slice(data);
    }

    pub fn f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> &mut Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.push(name, Dtype::F32, shape.to_vec(), &bytes);
        self
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> &mut Self {
        self.push(name, Dtype::U8, vec![data.len()], data);
        self
    }

    pub fn network(&mut self, prefix: &str, net: &Network<f32>) -> &mut Self {
        for spec in net.arch().tensors() {
            self.f32(&format!("{prefix}{}", spec.name), &spec.shape(), &net.params()[spec.range()]);
        }
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Writes to a temporary sibling first and renames, so readers never see
    /// a half-written file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::MalformedCheckpoint("bad magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16u64.saturating_add(header_len);
        if (bytes.len() as u64) < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                found: bytes.len() as u64,
            });
        }
        let header_bytes = &bytes[16..header_end as usize];
        let raw: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::MalformedCheckpoint("header without version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
        let payload = bytes[header_end as usize..].to_vec();
        let needed = header
            .sections
            .iter()
            .map(|s| s.offset + s.bytes)
            .max()
            .unwrap_or(0);
        if (payload.len() as u64) < needed {
            return Err(Error::Truncated {
                expected: header_end + needed,
                found: bytes.len() as u64,
            });
        }
        for s in &header.sections {
            let width = match s.dtype {
                Dtype::F32 => 4,
                Dtype::U8 => 1,
            };
            if s.shape.iter().product::<usize>() as u64 * width != s.bytes {
                return Err(Error::MalformedCheckpoint(format!("section {} size does not match its shape", s.name)));
            }
        }
        Ok(Self { header, payload })
    }

    fn section(&self, name: &str) -> Result<&SectionEntry> {
        self.header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing section {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.header.sections.iter().any(|s| s.name == name)
    }

    pub fn f32(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let s = self.section(name)?;
        if s.dtype != Dtype::F32 || s.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: s.shape.clone(),
            });
        }
        let raw = &self.payload[s.offset as usize..(s.offset + s.bytes) as usize];
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let s = self.section(name)?;
        if s.dtype != Dtype::U8 {
            return Err(Error::MalformedCheckpoint(format!("section {name} is not a byte section")));
        }
        Ok(&self.payload[s.offset as usize..(s.offset + s.bytes) as usize])
    }

    pub fn network(&self, prefix: &str, arch: Arch) -> Result<Network<f32>> {
        let mut params = Vec::with_capacity(arch.param_count());
        for spec in arch.tensors() {
            params.extend(self.f32(&format!("{prefix}{}", spec.name), &spec.shape())?);
        }
        Network::from_params(arch, params)
    }

    /// Errors unless the checkpoint was produced under `config_hash`.
    pub fn expect_config(&self, config_hash: &str) -> Result<()> {
        if self.header.config_hash != config_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} does not match {}",
                self.header.config_hash, config_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let net = Network::<f32>::init(Arch::intersection(), 4);
        let mut w = CheckpointWriter::new("test", "abc", serde_json::json!({"seed": 4}));
        w.network("m0/", &net).bytes("extra", &[1, 2, 3]);
        w.to_bytes().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::<f32>::init(Arch::intersection(), 4);
        let ck = Checkpoint::from_bytes(&sample()).unwrap();
        assert_eq!(ck.network("m0/", Arch::intersection()).unwrap(), net);
        assert_eq!(ck.bytes("extra").unwrap(), &[1, 2, 3]);
        assert_eq!(ck.header.meta["seed"], 4);
        assert!(ck.expect_config("abc").is_ok());
        assert!(matches!(ck.expect_config("abd"), Err(Error::Incompatible(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample();
        for cut in [4, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let bytes = sample();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let patched = header.replacen("\"version\":1", "\"version\":7", 1);
        assert_eq!(patched.len(), header.len());
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let ck = Checkpoint::from_bytes(&sample()).unwrap();
        let mut arch = Arch::intersection();
        arch.joint_units = 32;
        assert!(matches!(ck.network("m0/", arch), Err(Error::ShapeMismatch { .. })));
    }
}
