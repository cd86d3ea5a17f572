//! `EMIF` feature container.
//!
//! ```text
//! magic "EMIF" | version u16 LE
//! 3 × { present u8 | rows u32 LE | dim u32 LE | rows·dim f32 LE }   (visual, audio, text)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMIF_MAGIC: [u8; 4] = *b"EMIF";
pub const EMIF_VERSION: u16 = 1;

/// One modality's frames as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub present: bool,
    pub rows: usize,
    pub dim: usize,
    /// Row-major `rows × dim`.
    pub values: Vec<f32>,
}

impl FeatureBlock {
    pub fn absent(dim: usize) -> Self {
        FeatureBlock {
            present: false,
            rows: 0,
            dim,
            values: Vec::new(),
        }
    }

    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 || values.len() != rows * dim {
            return Err(Error::InvalidArgument(format!(
                "feature block {rows}×{dim} with {} values",
                values.len()
            )));
        }
        Ok(FeatureBlock {
            present: true,
            rows,
            dim,
            values,
        })
    }

    /// Narrows an `f64` tensor `[rows × dim]` to 32-bit storage.
    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidArgument(format!("feature block needs [rows × dim], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("feature block".into()));
        }
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&v| v as f32).collect())
    }

    /// Widens the stored frames to `f64`; `None` for an absent block.
    pub fn to_tensor(&self) -> Option<Tensor<f64>> {
        self.present.then(|| {
            Tensor::new(vec![self.rows, self.dim], self.values.iter().map(|&v| f64::from(v)).collect())
                .expect("validated block")
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub version: u16,
    /// Visual, audio, text.
    pub blocks: [FeatureBlock; 3],
}

impl FeatureFile {
    pub fn new(blocks: [FeatureBlock; 3]) -> Self {
        FeatureFile {
            version: EMIF_VERSION,
            blocks,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.blocks.iter().map(|b| 9 + 4 * b.values.len()).sum();
        let mut out = Vec::with_capacity(6 + payload);
        out.extend_from_slice(&EMIF_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for b in &self.blocks {
            out.push(u8::from(b.present));
            out.extend_from_slice(&(b.rows as u32).to_le_bytes());
            out.extend_from_slice(&(b.dim as u32).to_le_bytes());
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMIF_MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}, expected \"EMIF\"")));
        }
        let version_at = r.pos;
        let version = r.u16()?;
        if version != EMIF_VERSION {
            return Err(format_err(version_at, format!("unsupported version {version}")));
        }
        let mut blocks = Vec::with_capacity(3);
        for name in ["visual", "audio", "text"] {
            let flag_at = r.pos;
            let present = match r.take(1, "present flag")?[0] {
                0 => false,
                1 => true,
                other => return Err(format_err(flag_at, format!("{name} present flag must be 0 or 1, got {other}"))),
            };
            let rows_at = r.pos;
            let rows = r.u32()? as usize;
            let dim = r.u32()? as usize;
            if present && (rows == 0 || dim == 0) {
                return Err(format_err(rows_at, format!("{name} block marked present with shape {rows}×{dim}")));
            }
            if !present && rows != 0 {
                return Err(format_err(rows_at, format!("{name} block marked absent but has {rows} rows")));
            }
            let count = rows
                .checked_mul(dim)
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| format_err(rows_at, "block size overflows".into()))?;
            let raw = r.take(count, "frame data")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(FeatureBlock {
                present,
                rows,
                dim,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let blocks: [FeatureBlock; 3] = blocks.try_into().expect("three blocks");
        Ok(FeatureFile { version, blocks })
    }
}

pub(crate) fn format_err(offset: usize, message: String) -> Error {
    Error::Format {
        offset: offset as u64,
        message,
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2, "u16")?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, "u32")?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_feature_file(file: &FeatureFile, path: &Path) -> Result<()> {
    std::fs::write(path, file.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> FeatureFile {
        FeatureFile::new([
            FeatureBlock::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            FeatureBlock::new(1, 2, vec![-0.5, 0.25]).unwrap(),
            FeatureBlock::absent(4),
        ])
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample_file().encode();
        assert_eq!(&bytes[..4], b"EMIF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &3u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        // visual payload ends at 15 + 24 = 39; audio header 39..48; audio data 48..56; text header 56..65
        assert_eq!(bytes[56], 0);
        assert_eq!(&bytes[57..61], &0u32.to_le_bytes());
        assert_eq!(bytes.len(), 65);
        assert_eq!(FeatureFile::decode(&bytes).unwrap(), sample_file());
    }

    #[test]
    fn errors_report_offsets() {
        let bytes = sample_file().encode();
        let offset = |b: &[u8]| match FeatureFile::decode(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset(&bad), 4);
        let mut bad = bytes.clone();
        bad[39] = 7;
        assert_eq!(offset(&bad), 39);
        assert_eq!(offset(&bytes[..3]), 0);
        assert_eq!(offset(&bytes[..20]), 15);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(&long), 65);
    }

    #[test]
    fn narrowing_from_f64_tensor() {
        let t = Tensor::from_rows(&[[0.1, 0.2]]).unwrap();
        let b = FeatureBlock::from_tensor(&t).unwrap();
        assert_eq!(b.values, vec![0.1f32, 0.2f32]);
        assert_eq!(b.to_tensor().unwrap().data(), &[f64::from(0.1f32), f64::from(0.2f32)]);
        assert!(FeatureBlock::absent(3).to_tensor().is_none());
    }
}
