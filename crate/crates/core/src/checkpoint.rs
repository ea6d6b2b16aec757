//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MZNT" | u32 version | u32 len + model config text | u64 step | u64 proxy seed
//! u32 tensor count
//!   per tensor: u32 len + path | u8 dtype (0 = f64, 1 = f32) | u8 rank | u64 dims[rank] | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as ordinary tensors under `opt.m.<path>`
//! and `opt.v.<path>`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use mznet_tensor::{Shape, Tensor};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::Params;

pub const MAGIC: &[u8; 4] = b"MZNT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;
const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `model.*` configuration text.
    pub model_config: String,
    pub step: u64,
    pub proxy_seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameters and, when given, optimizer moments.
    pub fn from_state(model: &Model, adam: Option<&Adam>, step: u64, proxy_seed: u64) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model.params.iter().map(|(p, t)| (p.to_string(), t.clone())).collect();
        if let Some(adam) = adam {
            tensors.extend(adam.m.iter().map(|(p, t)| (format!("{M_PREFIX}{p}"), t.clone())));
            tensors.extend(adam.v.iter().map(|(p, t)| (format!("{V_PREFIX}{p}"), t.clone())));
        }
        Self {
            model_config: model.config.to_text(),
            step,
            proxy_seed,
            tensors,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let config = ModelConfig::from_text(&self.model_config)?;
        let mut params = Params::new();
        for (path, t) in &self.tensors {
            if !path.starts_with("opt.") {
                params.insert(path.clone(), t.clone())?;
            }
        }
        Model::from_params(&config, params)
    }

    /// Optimizer state with `t` equal to the stored step.
    pub fn adam(&self, config: AdamConfig) -> Adam {
        let mut adam = Adam::new(config);
        adam.t = self.step;
        for (path, t) in &self.tensors {
            if let Some(p) = path.strip_prefix(M_PREFIX) {
                adam.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = path.strip_prefix(V_PREFIX) {
                adam.v.insert(p.to_string(), t.clone());
            }
        }
        adam
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.model_config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.proxy_seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (path, t) in &self.tensors {
            put_str(&mut out, path);
            out.push(DTYPE_F64);
            out.push(4);
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let model_config = r.string()?;
        let step = r.u64()?;
        let proxy_seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let path = r.string()?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank != 4 {
                return Err(Error::Checkpoint(format!("`{path}`: rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{path}`: size overflow")))?;
            let data = match dtype {
                DTYPE_F64 => r
                    .take(
                        numel
                            .checked_mul(8)
                            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                DTYPE_F32 => r
                    .take(
                        numel
                            .checked_mul(4)
                            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                other => return Err(Error::Checkpoint(format!("`{path}`: unknown dtype {other}"))),
            };
            tensors.push((path, Tensor::from_vec(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            model_config,
            step,
            proxy_seed,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("path is not UTF-8".into()))
    }
}
