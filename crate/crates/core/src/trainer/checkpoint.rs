//! Versioned binary checkpoint with a JSON sidecar.
//!
//! Layout (little-endian): magic `GILTCKPT`, u32 version, u32 item dim,
//! u32 encoder layers, u32 transformer layers, u32 heads, u64-prefixed JSON
//! blob (train config and telemetry), u64 epoch, u64 optimizer step, u32
//! array count, then per array: u32-prefixed name, u8 dtype (0 = f64,
//! 1 = f32), u64 rows, u64 cols, row-major data. An FNV-1a 64 hash of all
//! preceding bytes closes the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, EpochTelemetry, TrainConfig};
use crate::error::{GiltError, Result};
use crate::model::Model;
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GILTCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Exact; required for bit-identical resume.
    F64,
    /// Half the size; parameters are rounded on save.
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub telemetry: Vec<EpochTelemetry>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    telemetry: Vec<EpochTelemetry>,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GiltError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Sidecar path: `<checkpoint>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| GiltError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| GiltError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GiltError::io(path, e))
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self.model.params.iter().map(|(k, m)| (format!("p:{k}"), m)).collect();
        out.extend(self.adam.m.iter().map(|(k, m)| (format!("m:{k}"), m)));
        out.extend(self.adam.v.iter().map(|(k, m)| (format!("v:{k}"), m)));
        out
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mc = &self.model.config;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        for v in [mc.item_dim(), mc.encoder.layers, mc.transformer.layers, mc.transformer.heads] {
            put_u32(&mut b, v as u32);
        }
        let meta = serde_json::to_vec(&Meta { config: self.config.clone(), telemetry: self.telemetry.clone() })
            .expect("config serializes");
        put_u64(&mut b, meta.len() as u64);
        b.extend_from_slice(&meta);
        put_u64(&mut b, self.epoch as u64);
        put_u64(&mut b, self.adam.step);
        let arrays = self.arrays();
        put_u32(&mut b, arrays.len() as u32);
        for (name, m) in arrays {
            put_u32(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            b.push(match precision {
                Precision::F64 => 0,
                Precision::F32 => 1,
            });
            put_u64(&mut b, m.rows() as u64);
            put_u64(&mut b, m.cols() as u64);
            for &x in m.as_slice() {
                match precision {
                    Precision::F64 => b.extend_from_slice(&x.to_le_bytes()),
                    Precision::F32 => b.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        let h = fnv(&b);
        put_u64(&mut b, h);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(GiltError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(GiltError::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(GiltError::Checkpoint(format!("version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| GiltError::Checkpoint(format!("embedded config: {e}")))?;
        let mc = &meta.config.model;
        let expect = [mc.item_dim(), mc.encoder.layers, mc.transformer.layers, mc.transformer.heads].map(|v| v as u32);
        if dims != expect {
            return Err(GiltError::Checkpoint(format!("header dims {dims:?} disagree with config {expect:?}")));
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| GiltError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
            let count = rows
                .checked_mul(cols)
                .filter(|&c| c <= body.len())
                .ok_or_else(|| GiltError::Checkpoint(format!("array `{name}` has an impossible shape")))?;
            let data: Vec<f64> = match dtype {
                0 => r.take(8 * count)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                1 => r
                    .take(4 * count)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                t => return Err(GiltError::Checkpoint(format!("array `{name}` has unknown dtype {t}"))),
            };
            let mat = Matrix::from_vec(rows, cols, data)?;
            match name.split_once(':') {
                Some(("p", k)) => params.insert(k, mat),
                Some(("m", k)) => {
                    m.insert(k.to_string(), mat);
                }
                Some(("v", k)) => {
                    v.insert(k.to_string(), mat);
                }
                _ => return Err(GiltError::Checkpoint(format!("unexpected array `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(GiltError::Checkpoint("trailing bytes after arrays".into()));
        }
        let expected = Model::init(meta.config.model.clone(), 0)?.params;
        for (k, p) in expected.iter() {
            let got = params.get(k).map_err(|_| GiltError::Checkpoint(format!("missing parameter `{k}`")))?;
            if got.shape() != p.shape() {
                return Err(GiltError::Checkpoint(format!("parameter `{k}` has shape {:?}, expected {:?}", got.shape(), p.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(GiltError::Checkpoint("checkpoint carries parameters the config does not define".into()));
        }
        Ok(Checkpoint {
            model: Model { config: meta.config.model.clone(), params },
            config: meta.config,
            adam: AdamState { step, m, v },
            epoch,
            telemetry: meta.telemetry,
        })
    }

    /// Writes the checkpoint and its JSON sidecar, each via temp-and-rename.
    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        write_atomic(path, &self.to_bytes(precision))?;
        let side = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        write_atomic(&sidecar_path(path), &side)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| GiltError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Identifier derived from the parameter values.
    pub fn id(&self) -> String {
        format!("{:016x}", self.model.params.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{adamw_step, AdamHyper, Optimizer, Trainer};

    fn trained() -> Checkpoint {
        let mut c = TrainConfig::desk();
        c.model = crate::model::ModelConfig::tiny(4);
        let mut t = Trainer::new(c).unwrap();
        let grads: BTreeMap<String, Matrix> =
            t.model.params.iter().map(|(k, m)| (k.clone(), m.map(|x| 0.1 * x + 0.01))).collect();
        let hp = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, optimizer: Optimizer::AdamW };
        adamw_step(&mut t.model.params, &grads, &mut t.adam, &hp);
        t.epoch = 1;
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = trained();
        let back = Checkpoint::from_bytes(&ck.to_bytes(Precision::F64)).unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p, Precision::F64).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(sidecar_path(&p).exists());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn f32_export_is_close_and_smaller() {
        let ck = trained();
        let b64 = ck.to_bytes(Precision::F64);
        let b32 = ck.to_bytes(Precision::F32);
        assert!(b32.len() < b64.len());
        let back = Checkpoint::from_bytes(&b32).unwrap();
        for (k, m) in ck.model.params.iter() {
            assert!(back.model.params.get(k).unwrap().max_abs_diff(m) < 1e-6);
        }
    }

    #[test]
    fn corruption_detected() {
        let ck = trained();
        let mut b = ck.to_bytes(Precision::F64);
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(GiltError::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"GILTCKPT").is_err());
        assert!(Checkpoint::from_bytes(b"something else entirely").is_err());
    }
}
