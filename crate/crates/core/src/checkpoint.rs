//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CAPLABCK" | u32 version | u64 len, config JSON
//! u64 iter | f64 best_val_loss
//! u64 param count | per param: u64 ndim, u64 dims.., f32 values..
//! u64 optimizer step | per param: f32 m.., f32 v..
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{OptState, TrainConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAPLABCK";
pub const VERSION: u32 = 1;

/// Configuration stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub iter: u64,
    pub best_val_loss: f64,
    pub model: Model<f32>,
    pub opt: OptState<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(&config);
        put_u64(&mut out, self.iter);
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        let params = self.model.params();
        put_u64(&mut out, params.len() as u64);
        for p in params {
            put_u64(&mut out, p.rank() as u64);
            for &d in p.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, p.data());
        }
        put_u64(&mut out, self.opt.step);
        for (m, v) in self.opt.m.iter().zip(&self.opt.v) {
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.len_u64()?;
        let config: CheckpointConfig = serde_json::from_slice(r.take(len)?)?;
        let iter = r.u64()?;
        let best_val_loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.len_u64()?;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let ndim = r.len_u64()?;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint("parameter shape overflows".into()))?;
            params.push(Tensor::new(&shape, r.f32s(n)?)?);
        }
        let model = Model::from_params(config.model.clone(), params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the stored config: {e}")))?;
        let mut opt = OptState::for_model(&model);
        let step = r.u64()?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.params() {
            m.push(r.f32s(p.len())?);
            v.push(r.f32s(p.len())?);
        }
        opt.restore(step, m, v)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            iter,
            best_val_loss,
            model,
            opt,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
