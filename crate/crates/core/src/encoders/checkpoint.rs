//! Versioned parameter container.
//!
//! Layout: the 8-byte magic `TFCKPT\0\0`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every array as
//! raw little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::nn::module::{join, Module};

const MAGIC: &[u8; 8] = b"TFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What network the arrays belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub encoder: EncoderVariant,
    /// Header output channels when a segmentation header is stored.
    pub header_classes: Option<usize>,
    /// Pretraining objective that produced the weights, if any.
    pub objective: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchDescriptor,
    trainable_params: usize,
    arrays: Vec<ArrayInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub arrays: Vec<(ArrayInfo, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(arch: ArchDescriptor) -> Self {
        Self {
            arch,
            arrays: Vec::new(),
        }
    }

    /// Appends every parameter and buffer of `module` under `prefix`.
    pub fn add(&mut self, prefix: &str, module: &dyn Module) {
        module.visit(prefix, &mut |name, p| {
            self.arrays.push((
                ArrayInfo {
                    name: name.to_string(),
                    shape: p.shape.clone(),
                    trainable: p.trainable,
                },
                p.value.clone(),
            ))
        });
    }

    pub fn trainable_params(&self) -> usize {
        self.arrays
            .iter()
            .filter(|(i, _)| i.trainable)
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Copies the arrays stored under `prefix` into `module`, requiring an
    /// exact match of names and shapes.
    pub fn restore(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        let scope = join(prefix, "");
        let stored: Vec<&(ArrayInfo, Vec<f32>)> = self
            .arrays
            .iter()
            .filter(|(i, _)| prefix.is_empty() || i.name.starts_with(&scope))
            .collect();
        let mut idx = 0;
        let mut err = None;
        module.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match stored.get(idx) {
                Some((info, values)) if info.name == name && info.shape == p.shape => {
                    p.value.copy_from_slice(values);
                }
                Some((info, _)) => {
                    err = Some(Error::Checkpoint(format!(
                        "expected {name} {:?}, found {} {:?}",
                        p.shape, info.name, info.shape
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing array {name}"))),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != stored.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays under '{prefix}', network has {idx}",
                stored.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            trainable_params: self.trainable_params(),
            arrays: self.arrays.iter().map(|(i, _)| i.clone()).collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let n: usize = self.arrays.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + hjson.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, v) in &self.arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::json("checkpoint header", e))?;
        let mut offset = 20 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for info in header.arrays {
            let n: usize = info.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", info.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            arrays.push((info, values));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        let ck = Self {
            arch: header.arch,
            arrays,
        };
        if ck.trainable_params() != header.trainable_params {
            return Err(Error::Checkpoint(format!(
                "header declares {} trainable parameters, arrays hold {}",
                header.trainable_params,
                ck.trainable_params()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
