//! Binary checkpoint container.
//!
//! ```text
//! "ATNLCKPT"                       8-byte magic
//! version                          u32
//! config length, config text       u32, UTF-8 key=value lines
//! block count                      u32
//! per block: name length, name, element count, values
//!                                  u32, UTF-8, u64, f32 each
//! CRC32 of every preceding byte    u32
//! ```
//! All integers and floats are little-endian. Loss history is kept at f32 precision.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::Vae;

pub const MAGIC: &[u8; 8] = b"ATNLCKPT";
pub const VERSION: u32 = 1;

const EPOCH_BLOCK: &str = "meta/epoch";
const HISTORY_BLOCKS: [&str; 5] = ["history/rec", "history/kl", "history/atn", "history/total", "history/active"];

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub atn: f64,
    pub total: f64,
    /// Fraction of mined triplets with a positive hinge.
    pub active: f64,
}

impl EpochRecord {
    fn fields(&self) -> [f64; 5] {
        [self.rec, self.kl, self.atn, self.total, self.active]
    }
}

/// A trained model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub model: Vae<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Stored at f32 precision.
    pub history: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, values: impl ExactSizeIterator<Item = f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_text();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        let params = self.model.named_params();
        put_u32(&mut out, (params.len() + 1 + HISTORY_BLOCKS.len()) as u32);
        for (name, p) in &params {
            put_block(&mut out, name, p.value.iter().copied());
        }
        put_block(&mut out, EPOCH_BLOCK, std::iter::once(self.epoch as f32));
        for (k, name) in HISTORY_BLOCKS.iter().enumerate() {
            put_block(&mut out, name, self.history.iter().map(|r| r.fields()[k] as f32));
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, None)
    }

    /// Parses and rebuilds the model at latent size `d_z`, whatever the stored config says.
    fn decode(bytes: &[u8], d_z: Option<usize>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = TrainingConfig::from_text(cfg_text)?;
        let count = r.u32()? as usize;
        let mut blocks: Vec<(String, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("checkpoint block name is not UTF-8".into()))?
                .to_string();
            let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("block too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blocks.push((name, values));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last block", body.len() - r.pos)));
        }
        let find = |name: &str| blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v);
        let epoch = find(EPOCH_BLOCK)
            .and_then(|v| v.first())
            .map_or(0, |&e| e as usize);
        let columns: Vec<&Vec<f32>> = HISTORY_BLOCKS.iter().filter_map(|n| find(n)).collect();
        let history = if columns.len() == HISTORY_BLOCKS.len() {
            let len = columns.iter().map(|c| c.len()).min().unwrap_or(0);
            (0..len)
                .map(|i| EpochRecord {
                    epoch: i + 1,
                    rec: columns[0][i] as f64,
                    kl: columns[1][i] as f64,
                    atn: columns[2][i] as f64,
                    total: columns[3][i] as f64,
                    active: columns[4][i] as f64,
                })
                .collect()
        } else {
            Vec::new()
        };
        let model = Vae::from_named_values(d_z.unwrap_or(config.d_z), &blocks)?;
        Ok(Self { config, model, epoch, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads into a model of latent size `d_z`; a checkpoint of another size is a shape error.
    pub fn load_with_latent_dim(path: &Path, d_z: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, Some(d_z))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = TrainingConfig { seed: 9, ..TrainingConfig::default() };
        Checkpoint {
            model: Vae::new(config.d_z, 9).unwrap(),
            config,
            epoch: 2,
            history: vec![
                EpochRecord { epoch: 1, rec: 0.25, kl: 3.0, atn: 0.5, total: 3.0003, active: 0.75 },
                EpochRecord { epoch: 2, rec: 0.125, kl: 2.0, atn: 0.25, total: 1.5, active: 0.5 },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.config, c.config);
        assert_eq!(back.epoch, 2);
        assert_eq!(back.history.len(), 2);
        assert_eq!(back.history[1].kl, 2.0);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: VERSION })
        ));
    }

    #[test]
    fn latent_size_mismatch_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_with_latent_dim(&path, 16).is_ok());
        assert!(matches!(Checkpoint::load_with_latent_dim(&path, 32), Err(Error::Shape(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
