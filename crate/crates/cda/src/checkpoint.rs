//! Binary checkpoint files.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic     "CDACKPT\0"
//! version   u32
//! config    u64 length + JSON {"model": .., "train": .., "param_seed": ..}
//! tensors   u32 count, then per tensor:
//!           u16 name length, UTF-8 name, u8 dtype (0 = f64, 1 = f32),
//!           u8 rank, rank × u64 dims, raw payload
//! sampler   32-byte ChaCha key, u128 word position
//! epoch     u64
//! step      u64
//! crc32     u32 over every preceding byte
//! ```
//!
//! Tensor names carry a `param/`, `buffer/` or `velocity/` prefix.

use std::fs;
use std::path::Path;

use cda_core::data::SamplerState;
use cda_core::model::{Model, ParameterStore};
use cda_core::numerics::Tensor;
use cda_core::pipeline::{Checkpoint, OptimizerState, TrainConfig, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CDACKPT\0";

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: Model,
    train: TrainConfig,
    param_seed: u64,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        param_seed: ckpt.params.seed(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    let tensors = ckpt.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&ckpt.sampler.key);
    out.extend_from_slice(&ckpt.sampler.word_pos.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 || bytes[..8] != MAGIC {
        return Err(corrupt("missing magic or file too short"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch (truncated or damaged file)"));
    }

    let mut r = Reader { bytes: body, at: 12 };
    let json_len = r.u64()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| corrupt(&format!("config blob: {e}")))?;

    let mut params = ParameterStore::new(header.param_seed);
    let mut velocities = Vec::new();
    for _ in 0..r.u32()? {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let tensor = r.tensor()?;
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n, tensor)?;
        } else if let Some(n) = name.strip_prefix("buffer/") {
            params.set_buffer(n, tensor);
        } else if let Some(n) = name.strip_prefix("velocity/") {
            velocities.push((n.to_string(), tensor));
        } else {
            return Err(corrupt(&format!("unknown tensor section in `{name}`")));
        }
    }
    let key: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let epoch = r.u64()?;
    let step = r.u64()?;
    if r.at != body.len() {
        return Err(corrupt("trailing bytes after the step counter"));
    }

    let ckpt = Checkpoint {
        model: header.model,
        train: header.train,
        params,
        optimizer: OptimizerState::from_velocities(velocities),
        sampler: SamplerState { key, word_pos },
        epoch,
        step,
    };
    check_consistent(&ckpt)?;
    Ok(ckpt)
}

/// Parameters, buffers and velocities must match what the stored model
/// would initialize.
fn check_consistent(ckpt: &Checkpoint) -> Result<()> {
    let fresh = ckpt.model.init_params(0)?;
    let shapes = |it: &mut dyn Iterator<Item = (&str, &Tensor)>| -> Vec<(String, Vec<usize>)> {
        it.map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    };
    let expected = shapes(&mut fresh.iter());
    if shapes(&mut ckpt.params.iter()) != expected {
        return Err(Error::Checkpoint(
            "parameter tensors do not match the stored model".into(),
        ));
    }
    if shapes(&mut ckpt.params.buffers()) != shapes(&mut fresh.buffers()) {
        return Err(Error::Checkpoint("buffers do not match the stored model".into()));
    }
    if shapes(&mut ckpt.optimizer.velocities()) != expected {
        return Err(Error::Checkpoint(
            "optimizer state does not match the parameters".into(),
        ));
    }
    Ok(())
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt payload: {what}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("length field runs past the end of the file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("tensor dimensions overflow"))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => self
                .take(len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => self
                .take(len.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => return Err(corrupt(&format!("unknown dtype tag {other}"))),
        };
        Tensor::new(dims, data).map_err(|e| corrupt(&e.to_string()))
    }
}
