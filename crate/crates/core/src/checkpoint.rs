//! `EMIC` checkpoint container.
//!
//! ```text
//! magic "EMIC" | version u16 LE
//! records until EOF: name_len u16 | name UTF-8 | rank u8 | rank × extent u32 | f64 LE values
//! ```
//!
//! Model parameters are stored under their [`Model::named_params`] names,
//! EMA shadows under `ema/<name>`.

use std::fs;
use std::path::Path;

use crate::data::emif::{format_err, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Ema;
use crate::tensor::Tensor;

pub const EMIC_MAGIC: [u8; 4] = *b"EMIC";
pub const EMIC_VERSION: u16 = 1;
pub const EMA_PREFIX: &str = "ema/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub records: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(records: Vec<(String, Tensor<f64>)>) -> Self {
        Checkpoint {
            version: EMIC_VERSION,
            records,
        }
    }

    /// Snapshots the model's parameters and, if given, the EMA shadows.
    pub fn from_model(model: &Model<f64>, ema: Option<&Ema<f64>>) -> Self {
        let mut records: Vec<(String, Tensor<f64>)> = model
            .named_params()
            .into_iter()
            .map(|(name, p)| (name, p.value.clone()))
            .collect();
        if let Some(ema) = ema {
            let shadows: Vec<_> = records
                .iter()
                .zip(ema.shadows())
                .map(|((name, _), s)| (format!("{EMA_PREFIX}{name}"), s.clone()))
                .collect();
            records.extend(shadows);
        }
        Checkpoint::new(records)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Records that are not EMA shadows.
    pub fn params(&self) -> impl Iterator<Item = &(String, Tensor<f64>)> {
        self.records.iter().filter(|(n, _)| !n.starts_with(EMA_PREFIX))
    }

    pub fn has_ema(&self) -> bool {
        self.records.iter().any(|(n, _)| n.starts_with(EMA_PREFIX))
    }

    /// Learnable scalar count, excluding shadows.
    pub fn parameter_count(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a model for `config` from raw (`use_ema = false`) or shadow weights.
    pub fn restore(&self, config: &ModelConfig, use_ema: bool) -> Result<Model<f64>> {
        let mut model = Model::new(config.clone(), 0)?;
        let mut values = Vec::new();
        for name in model.param_names() {
            let key = if use_ema { format!("{EMA_PREFIX}{name}") } else { name.clone() };
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {key:?}")))?;
            values.push(t.clone());
        }
        let expected = model.named_params().len() * if self.has_ema() { 2 } else { 1 };
        if self.records.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, config expects {expected}",
                self.records.len()
            )));
        }
        model.set_param_values(&values).map_err(|e| match e {
            Error::Shape { left, right, .. } => {
                Error::Data(format!("checkpoint tensor shape {right:?} does not match config shape {left:?}"))
            }
            other => other,
        })?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&EMIC_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for (name, t) in &self.records {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {} bytes", name.len())))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::InvalidArgument(format!("tensor {name:?} has rank {}", t.rank())))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e)
                    .map_err(|_| Error::InvalidArgument(format!("extent {e} of {name:?} exceeds u32")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMIC_MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}, expected \"EMIC\"")));
        }
        let version_at = r.pos;
        let version = r.u16()?;
        if version != EMIC_VERSION {
            return Err(format_err(version_at, format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| format_err(name_at, format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank_at = r.pos;
            let rank = r.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(format_err(rank_at, format!("tensor {name:?} has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let e = r.u32()? as usize;
                if e == 0 {
                    return Err(format_err(at, format!("tensor {name:?} has a zero extent")));
                }
                shape.push(e);
            }
            let count = shape
                .iter()
                .try_fold(8usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| format_err(rank_at, format!("tensor {name:?} size overflows")))?;
            let raw = r.take(count, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if records.iter().any(|(n, _)| *n == name) {
                return Err(format_err(name_at, format!("duplicate tensor {name:?}")));
            }
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { version, records })
    }

    /// Writes via a temporary sibling and rename, so a crash never leaves a
    /// half-written checkpoint in place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("emic.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
