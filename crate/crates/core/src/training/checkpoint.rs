//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    4 bytes  "MCLU"
//! version  u32
//! config   u64 length, then that many bytes of UTF-8 JSON (TrainConfig)
//! count    u32 number of tensor records
//! record   u32 name length, name bytes (UTF-8),
//!          u32 rank, rank x u64 dims, prod(dims) x f64 values
//! ```
//!
//! Records are the model parameters in name order, then `certificates`
//! (`k x latent`) and `label_stats` (`[mean, std]`). Trailing bytes are an
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::diffcore::Tensor;
use crate::model::{LabelStats, Model, ModelDims, ParamStore};
use crate::uncertainty::CertificateBank;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MCLU";
const CERTIFICATES: &str = "certificates";
const LABEL_STATS: &str = "label_stats";

/// A trained model together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn dims(&self) -> &ModelDims {
        &self.model.dims
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);

        let stats = Tensor::row(vec![self.model.label_stats.mean, self.model.label_stats.std]);
        let records: Vec<(&str, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(k, t)| (k.as_str(), t))
            .chain([(CERTIFICATES, self.model.certificates.matrix()), (LABEL_STATS, &stats)])
            .collect();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u64("config length")? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }

        let certs = tensors
            .remove(CERTIFICATES)
            .ok_or_else(|| Error::Checkpoint("missing certificates record".into()))?;
        let stats = tensors
            .remove(LABEL_STATS)
            .ok_or_else(|| Error::Checkpoint("missing label_stats record".into()))?;
        if stats.numel() != 2 {
            return Err(Error::Checkpoint("label_stats must hold two values".into()));
        }
        let dims = config.dims;
        let params = ParamStore::from_map(tensors);
        params.check_layout(&dims)?;
        if certs.shape() != [dims.certificates, dims.latent()] {
            return Err(Error::Dim(format!(
                "certificates {:?}, expected [{}, {}]",
                certs.shape(),
                dims.certificates,
                dims.latent()
            )));
        }
        Ok(Self {
            model: Model {
                dims,
                params,
                certificates: CertificateBank::from_matrix(certs)?,
                label_stats: LabelStats {
                    mean: stats.data()[0],
                    std: stats.data()[1],
                },
            },
            config,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

/// Reads a checkpoint. With `expected` set, a checkpoint of other dimensions
/// is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelDims>) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&fs::read(path)?)?;
    if let Some(d) = expected {
        if d != ck.dims() {
            return Err(Error::Dim(format!(
                "checkpoint dims {:?} differ from expected {:?}",
                ck.dims(),
                d
            )));
        }
    }
    Ok(ck)
}
