//! Network checkpoints.
//!
//! A checkpoint file holds one or more named networks: a JSON header listing
//! each component's name, [`MlpSpec`] and parameter count, then the
//! parameters as little-endian `f64` in header order. A text sidecar
//! (`<file>.manifest`) lists layer shapes and the SHA-256 of the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Mlp, MlpSpec, ParamVector};
use crate::error::{Error, Result};
use crate::framing::{f64s_to_le, le_to_f64s, read_framed, read_header, write_framed};

pub const CHECKPOINT_MAGIC: &[u8] = b"TABBCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    spec: MlpSpec,
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    entries: Vec<EntryHeader>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, net: &Mlp) {
        self.entries.push((name.into(), net.clone()));
    }

    pub fn get(&self, name: &str) -> Result<&Mlp> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no component `{name}`")))
    }

    fn payload(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (_, net) in &self.entries {
            f64s_to_le(&net.params.values, &mut payload);
        }
        payload
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(name, net)| EntryHeader {
                    name: name.clone(),
                    spec: net.spec.clone(),
                    count: net.params.len(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload = self.payload();
        write_framed(path, CHECKPOINT_MAGIC, &header, &payload)?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, self.sidecar_text(&payload)).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    fn sidecar_text(&self, payload: &[u8]) -> String {
        let mut s = String::from("# tabb checkpoint manifest v1\n");
        for (name, net) in &self.entries {
            let _ = writeln!(s, "component {name} count={}", net.params.len());
            for shape in &net.params.manifest {
                let _ = writeln!(
                    s,
                    "layer {name} {} rows={} cols={} bias={}",
                    shape.layer, shape.rows, shape.cols, shape.bias
                );
            }
        }
        let _ = writeln!(s, "sha256 {}", hex::encode(Sha256::digest(payload)));
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let framed = read_framed(path, CHECKPOINT_MAGIC, |h| {
            let header: CheckpointHeader = serde_json::from_slice(h)?;
            Ok(header.entries.iter().map(|e| e.count * 8).sum())
        })?;
        let header: CheckpointHeader = serde_json::from_slice(&framed.header)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let values = le_to_f64s(&framed.payload);
        let mut offset = 0;
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let params = ParamVector::from_values(&e.spec, values[offset..offset + e.count].to_vec())
                .map_err(|err| Error::Format {
                    path: path.into(),
                    reason: format!("component {}: {err}", e.name),
                })?;
            offset += e.count;
            if !params.is_finite() {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("component {} has non-finite parameters", e.name),
                });
            }
            entries.push((e.name, Mlp::new(e.spec, params)?));
        }
        let ckpt = Checkpoint {
            meta: header.meta,
            entries,
        };
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let expected = ckpt.sidecar_text(&framed.payload);
            if text != expected {
                return Err(Error::Format {
                    path: sidecar,
                    reason: "sidecar manifest does not match checkpoint contents".into(),
                });
            }
        }
        Ok(ckpt)
    }

    /// Header-only read: component names and metadata.
    pub fn inspect(path: &Path) -> Result<(Vec<(String, MlpSpec)>, serde_json::Value)> {
        let header: CheckpointHeader = serde_json::from_slice(&read_header(path, CHECKPOINT_MAGIC)?)?;
        Ok((
            header.entries.into_iter().map(|e| (e.name, e.spec)).collect(),
            header.meta,
        ))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}
