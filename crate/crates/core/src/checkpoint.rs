//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `RBGNCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! raw little-endian tensor payload. The header carries the training
//! configuration, network specs, counters, a tensor directory and the
//! SHA-256 of the payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::EquilibriumState;
use crate::models::NetworkSpecs;
use crate::nn::{ParamLayout, ParameterSet};
use crate::optim::Adam;
use crate::tensor::Real;
use crate::training::{NetworkParams, TrainConfig};

pub const MAGIC: &[u8; 8] = b"RBGNCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    config: TrainConfig,
    specs: NetworkSpecs,
    iteration: u64,
    equilibrium: EquilibriumState,
    adam_steps: [u64; 3],
    init_seeds: [u64; 3],
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub specs: NetworkSpecs,
    pub params: NetworkParams<T>,
    pub adam_generator: Adam<T>,
    pub adam_patch: Adam<T>,
    pub adam_autoencoder: Adam<T>,
    pub equilibrium: EquilibriumState,
    pub iteration: u64,
}

impl<T: Real> Checkpoint<T> {
    fn sections(&self) -> [(&'static str, &ParameterSet<T>); 9] {
        [
            ("generator", &self.params.generator),
            ("patch", &self.params.patch),
            ("autoencoder", &self.params.autoencoder),
            ("adam.generator.m", &self.adam_generator.m),
            ("adam.generator.v", &self.adam_generator.v),
            ("adam.patch.m", &self.adam_patch.m),
            ("adam.patch.v", &self.adam_patch.v),
            ("adam.autoencoder.m", &self.adam_autoencoder.m),
            ("adam.autoencoder.v", &self.adam_autoencoder.v),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (section, set) in self.sections() {
            for (info, values) in set.layout().entries().iter().zip(set.values()) {
                tensors.push(TensorEntry {
                    name: format!("{section}/{}", info.name),
                    offset,
                    len: values.len() as u64,
                });
                offset += values.len() as u64;
                payload.extend(T::to_le_bytes_vec(values));
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            specs: self.specs.clone(),
            iteration: self.iteration,
            equilibrium: self.equilibrium,
            adam_steps: [self.adam_generator.steps, self.adam_patch.steps, self.adam_autoencoder.steps],
            init_seeds: [
                self.params.generator.init_seed(),
                self.params.patch.init_seed(),
                self.params.autoencoder.init_seed(),
            ],
            tensors,
            payload_sha256: format!("{:x}", Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Decode a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < PREAMBLE {
            return Err(fail(format!("truncated: {} bytes is shorter than the preamble", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| fail(format!("malformed header: {e}")))?;
        if header.version != version {
            return Err(fail(format!("header version {} disagrees with preamble {version}", header.version)));
        }
        if header.dtype != T::DTYPE {
            return Err(fail(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        let payload = &bytes[header_end..];
        let width = T::to_le_bytes_vec(&[T::zero()]).len();
        let expected: u64 = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() as u64 != expected * width as u64 {
            return Err(fail(format!(
                "truncated payload: {} bytes, expected {}",
                payload.len(),
                expected * width as u64
            )));
        }
        let digest = format!("{:x}", Sha256::digest(payload));
        if digest != header.payload_sha256 {
            return Err(fail("payload checksum mismatch".into()));
        }

        let nets = header.specs.build().map_err(|e| fail(format!("embedded specs: {e}")))?;
        let mut entries = header.tensors.iter();
        let mut read_set = |section: &str, layout: &ParamLayout, seed: u64| -> Result<ParameterSet<T>> {
            let mut values = Vec::with_capacity(layout.entries().len());
            for info in layout.entries() {
                let name = format!("{section}/{}", info.name);
                let entry = entries
                    .next()
                    .ok_or_else(|| fail(format!("missing tensor {name}")))?;
                if entry.name != name || entry.len as usize != info.len() {
                    return Err(fail(format!(
                        "tensor {} (len {}) does not match expected {name} (len {})",
                        entry.name,
                        entry.len,
                        info.len()
                    )));
                }
                let start = entry.offset as usize * width;
                let end = start + entry.len as usize * width;
                let raw = payload
                    .get(start..end)
                    .ok_or_else(|| fail(format!("tensor {name} lies outside the payload")))?;
                values.push(T::from_le_bytes_slice(raw));
            }
            Ok(ParameterSet::from_values(layout, values, seed).expect("lengths checked against layout"))
        };
        let (gl, pl, al) = (nets.generator.layout(), nets.patch.layout(), nets.autoencoder.layout());
        let [sg, sp, sa] = header.init_seeds;
        let params = NetworkParams {
            generator: read_set("generator", gl, sg)?,
            patch: read_set("patch", pl, sp)?,
            autoencoder: read_set("autoencoder", al, sa)?,
        };
        let [tg, tp, ta] = header.adam_steps;
        let adam_generator = Adam {
            m: read_set("adam.generator.m", gl, 0)?,
            v: read_set("adam.generator.v", gl, 0)?,
            steps: tg,
        };
        let adam_patch = Adam {
            m: read_set("adam.patch.m", pl, 0)?,
            v: read_set("adam.patch.v", pl, 0)?,
            steps: tp,
        };
        let adam_autoencoder = Adam {
            m: read_set("adam.autoencoder.m", al, 0)?,
            v: read_set("adam.autoencoder.v", al, 0)?,
            steps: ta,
        };
        if entries.next().is_some() {
            return Err(fail("unexpected extra tensors".into()));
        }
        Ok(Self {
            config: header.config,
            specs: header.specs,
            params,
            adam_generator,
            adam_patch,
            adam_autoencoder,
            equilibrium: header.equilibrium,
            iteration: header.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write to a sibling first so an interrupted save never leaves a
        // half-written checkpoint under the final name.
        let tmp = tmp_path(path);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Most recent `ckpt_*.rgck` in `dir`, by iteration number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let rd = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(iter) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".rgck"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| iter > *b) {
            best = Some((iter, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}
