//! Checkpoints: a JSON manifest next to a binary tensor blob.
//!
//! Blob layout (all integers little-endian): magic `MINVCKPT`, `u32` format
//! version, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 name,
//! a `u32` rank, `u64` extents and the `f32` values. Names carry a section
//! prefix: `raw.`, `ema.`, `adam_m.`, `adam_v.`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{TrainConfig, TrainError};
use crate::corpus::sha256_hex;
use crate::model::{param_specs, DenoiserParams, ModelConfig};
use crate::numkit::Tensor;

const MAGIC: &[u8; 8] = b"MINVCKPT";
pub const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 4] = ["raw", "ema", "adam_m", "adam_v"];

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Training randomness is a pure function of `(seed, step)`, so this pair is
/// the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub build: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub val_loss: f64,
    pub rng: RngState,
    pub corpus_hash: String,
    pub encoder_seed: u64,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub raw: DenoiserParams<f32>,
    pub ema: DenoiserParams<f32>,
    pub adam: AdamState<f32>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn blob_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let groups: [&[Tensor<f32>]; 4] = [ckpt.raw.tensors(), ckpt.ema.tensors(), &ckpt.adam.m, &ckpt.adam.v];
    put_u32(&mut out, groups.iter().map(|g| g.len() as u32).sum());
    for (section, group) in SECTIONS.iter().zip(groups) {
        for (spec, t) in ckpt.raw.specs().iter().zip(group) {
            let name = format!("{section}.{}", spec.name);
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Writes `manifest.json` and `tensors.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir)?;
    let blob = blob_bytes(ckpt);
    let mut manifest = ckpt.manifest.clone();
    manifest.blob_sha256 = sha256_hex(&blob);
    std::fs::write(dir.join(BLOB_FILE), &blob)?;
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(dir.to_path_buf())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8], TrainError> {
        if self.bytes.len() - self.pos < k {
            return Err(TrainError::Checkpoint(format!(
                "blob truncated at byte {} (needed {k} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TrainError::Checkpoint("bad blob magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "blob format {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.checked_mul(4).ok_or_else(|| TrainError::Checkpoint(format!("{name}: absurd shape")))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name.clone(), Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(format!("{name}: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Loads a checkpoint. With `expect`, every tensor must match that config's
/// shapes; the error names the first one that does not.
pub fn load_checkpoint(dir: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "manifest format {}, this build reads {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    let bytes = std::fs::read(dir.join(BLOB_FILE))?;
    let tensors = parse_blob(&bytes)?;
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(TrainError::Checkpoint("blob hash does not match manifest".into()));
    }
    let config = expect.unwrap_or(&manifest.model);
    let (specs, _) = param_specs(config);
    let mut it = tensors.into_iter();
    let mut groups: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(4);
    for section in SECTIONS {
        let mut group = Vec::with_capacity(specs.len());
        for spec in &specs {
            let want_name = format!("{section}.{}", spec.name);
            let (name, t) = it
                .next()
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {want_name}")))?;
            if name != want_name {
                return Err(TrainError::Checkpoint(format!("expected tensor {want_name}, found {name}")));
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            group.push(t);
        }
        groups.push(group);
    }
    if let Some((name, _)) = it.next() {
        return Err(TrainError::Checkpoint(format!("unexpected extra tensor {name}")));
    }
    let v = groups.pop().expect("four sections");
    let m = groups.pop().expect("four sections");
    let ema = DenoiserParams::from_tensors(config, groups.pop().expect("four sections"))?;
    let raw = DenoiserParams::from_tensors(config, groups.pop().expect("four sections"))?;
    Ok(Checkpoint {
        manifest,
        raw,
        ema,
        adam: AdamState { m, v },
    })
}
