//! Binary checkpoints holding configs, vocabulary, parameters and Adam state.
//!
//! Layout (all integers little-endian): magic `SCKP`, `u32` format version,
//! `u64` header length and a JSON header with both configs and the
//! vocabulary, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8
//! name, `u32` rank, `u64` extents and `f64` values. The optimizer follows
//! as a `u64` step, a `u8` flag and, when the flag is 1, every first moment
//! and then every second moment as raw `f64` values in parameter order.

use std::fs;
use std::path::Path;

use sarcasm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocab;
use crate::error::{CoreError, Result};
use crate::model::{build_variant, ModelConfig, ModelParams};
use crate::training::{OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Option<Vocab>,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Option<Vec<String>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| CoreError::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab: self.vocab.as_ref().map(|v| v.entries().to_vec()),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| CoreError::Checkpoint(format!("cannot encode header: {e}")))?;
        let named = self.params.named();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_u32(&mut out, named.len())?;
        for (name, t) in &named {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            put_values(&mut out, t);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let opt = &self.optimizer;
        if opt.first_moment.is_empty() {
            out.push(0);
        } else {
            if opt.first_moment.len() != named.len() || opt.second_moment.len() != named.len() {
                return Err(CoreError::Checkpoint(
                    "optimizer state does not match the parameters".into(),
                ));
            }
            out.push(1);
            for (m, (_, p)) in opt
                .first_moment
                .iter()
                .chain(&opt.second_moment)
                .zip(named.iter().cycle())
            {
                if m.shape() != p.shape() {
                    return Err(CoreError::Checkpoint(
                        "optimizer moment shape mismatch".into(),
                    ));
                }
                put_values(&mut out, m);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = r.len_u64()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CoreError::Checkpoint(format!("bad header: {e}")))?;
        let vocab = header.vocab.map(Vocab::from_tokens).transpose()?;
        let mut params = build_variant(&header.model, 0)
            .map_err(|e| CoreError::Checkpoint(format!("stored model config is invalid: {e}")))?;
        let count = r.u32()? as usize;
        let mut slots = params.named_mut();
        if count != slots.len() {
            return Err(CoreError::Checkpoint(format!(
                "{count} tensors stored, the configured model has {}",
                slots.len()
            )));
        }
        for (name, slot) in slots.iter_mut() {
            let len = r.u32()? as usize;
            let stored = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CoreError::Checkpoint("tensor name is not UTF-8".into()))?;
            if stored != name {
                return Err(CoreError::Checkpoint(format!(
                    "expected tensor `{name}`, found `{stored}`"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            r.fill(slot.data_mut())?;
        }
        let shapes: Vec<Vec<usize>> = slots.iter().map(|(_, t)| t.shape().to_vec()).collect();
        drop(slots);
        let step = r.u64()?;
        let optimizer = match r.take(1)?[0] {
            0 => OptimizerState {
                step,
                ..Default::default()
            },
            1 => {
                let mut read_all = || -> Result<Vec<Tensor>> {
                    shapes
                        .iter()
                        .map(|s| {
                            let mut t = Tensor::zeros(s.clone());
                            r.fill(t.data_mut())?;
                            Ok(t)
                        })
                        .collect()
                };
                let first_moment = read_all()?;
                let second_moment = read_all()?;
                OptimizerState {
                    step,
                    first_moment,
                    second_moment,
                }
            }
            f => return Err(CoreError::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if !params.is_finite() {
            return Err(CoreError::Checkpoint(
                "stored parameters are not finite".into(),
            ));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            vocab,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CoreError::Checkpoint(msg) => {
                CoreError::Checkpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CoreError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("eight bytes"),
        ))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CoreError::Checkpoint(format!("length {v} is too large")))
    }

    fn fill(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(
            out.len()
                .checked_mul(8)
                .ok_or_else(|| CoreError::Checkpoint("tensor too large".into()))?,
        )?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("eight bytes"));
        }
        Ok(())
    }
}
