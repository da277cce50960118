//! Checkpoint persistence.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header, then
//! the raw tensor blob (f32 little-endian, at the offsets the header lists).
//! The header carries the model kind and config, the optimizer snapshot, the
//! rng position, and a SHA-256 of the blob; saving is write-temp-then-rename.

use crate::manifest::atomic_write;
use mra_core::nn::optim::OptimizerStateDump;
use mra_core::nn::params::{ParamMut, ParamRef, ParamSet};
use mra_core::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MRACKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

/// ChaCha8 position: the original seed plus the stream/word cursor, enough to
/// clone the generator mid-sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngPos {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngPos {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let word_pos = rng.get_word_pos();
        RngPos {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// "mae" or "classifier"; guards against loading one into the other.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerStateDump>,
    pub rng: Option<RngPos>,
    pub data_sha256: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    blob: Vec<u8>,
}

/// Named tensor in saving order.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

pub fn dump_params<P: ParamSet<f32>>(params: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    params.visit(&mut |name, p| {
        out.push((name.to_string(), p.shape(), p.iter().collect()));
    });
    out
}

/// Overwrites every visited parameter from the map; every tensor must be
/// present with the right shape, and nothing may be left over.
pub fn load_params<P: ParamSet<f32>>(
    params: &mut P,
    tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut shape_err = None;
    params.visit_mut(&mut |name, p| {
        let Some((shape, data)) = tensors.get(name) else {
            missing.push(name.to_string());
            return;
        };
        used += 1;
        let want = match &p {
            ParamMut::Vector(v) => vec![v.len()],
            ParamMut::Matrix(m) => vec![m.nrows(), m.ncols()],
        };
        if *shape != want || data.len() != p.len() {
            shape_err.get_or_insert(format!(
                "tensor {name} has shape {shape:?}, model expects {want:?}"
            ));
            return;
        }
        match p {
            ParamMut::Vector(v) => {
                for (dst, src) in v.iter_mut().zip(data) {
                    *dst = *src;
                }
            }
            ParamMut::Matrix(m) => {
                for (dst, src) in m.iter_mut().zip(data) {
                    *dst = *src;
                }
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(Error::state(e));
    }
    if !missing.is_empty() {
        return Err(Error::state(format!("checkpoint lacks tensors: {missing:?}")));
    }
    if used < tensors.len() {
        let known: Vec<&String> = tensors.keys().collect();
        return Err(Error::state(format!(
            "checkpoint holds {} tensors, model visits {used}; names {known:?}",
            tensors.len()
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn build(
        kind: &str,
        config: serde_json::Value,
        step: u64,
        epoch: u64,
        tensors: Vec<NamedTensor>,
        optimizer: Option<OptimizerStateDump>,
        rng: Option<RngPos>,
    ) -> Self {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, shape, data) in tensors {
            let offset = blob.len() as u64;
            for v in &data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape,
                dtype: "f32".into(),
                offset,
                len: data.len() as u64,
            });
        }
        let data_sha256 = hex(&Sha256::digest(&blob));
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                config,
                step,
                epoch,
                tensors: entries,
                optimizer,
                rng,
                data_sha256,
            },
            blob,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::state(format!("encoding checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::state("corrupt checkpoint: bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let Some(header_bytes) = bytes.get(16..16 + header_len) else {
            return Err(Error::state("corrupt checkpoint: truncated header"));
        };
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::state(format!("corrupt checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::state(format!(
                "checkpoint format version {} but this build reads {FORMAT_VERSION}",
                header.format_version
            )));
        }
        let blob = bytes[16 + header_len..].to_vec();
        if hex(&Sha256::digest(&blob)) != header.data_sha256 {
            return Err(Error::state(
                "corrupt checkpoint: tensor data does not match its checksum",
            ));
        }
        Ok(Checkpoint { header, blob })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::state(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::state(format!("{}: {e}", path.display())))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::state(format!(
                "checkpoint holds a {:?} model, this task needs {kind:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn tensor_map(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for e in &self.header.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize * 4;
            let Some(raw) = self.blob.get(start..end) else {
                return Err(Error::state(format!("tensor {} overruns the blob", e.name)));
            };
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if out.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
                return Err(Error::state(format!("duplicate tensor name {}", e.name)));
            }
        }
        Ok(out)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::state(format!("checkpoint config does not parse: {e}")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
