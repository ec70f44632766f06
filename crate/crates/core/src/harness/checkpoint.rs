//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CAGCKPT\0"
//! version    u32
//! cfg hash   32 bytes  SHA-256 of the canonical run config
//! meta       u64 length + JSON {run, model}
//! vocab      u64 length + JSON array of tokens
//! params     u32 count, then per tensor:
//!              u32 name length + name, u32 rank, u64 dims[rank], f64 data
//! optimizer  u64 step, f64 base_lr, u64 epoch, then m and v for every
//!              tensor in parameter order (lengths implied)
//! checksum   32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::decoder::OptimState;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{ParamStore, Tensor};
use crate::text::Vocab;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    run: RunConfig,
    model: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub optim: OptimState,
}

impl Checkpoint {
    /// Handles onto the stored parameters, validated against the config.
    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::bind(&self.model, &self.store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&Sha256::digest(self.run.canonical_json().as_bytes()));
        let meta = serde_json::to_vec(&Meta {
            run: self.run.clone(),
            model: self.model,
        })?;
        put_blob(&mut w, &meta);
        put_blob(&mut w, &serde_json::to_vec(&self.vocab)?);

        w.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, name, t) in self.store.iter() {
            w.extend_from_slice(&(name.len() as u32).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                w.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            put_f64s(&mut w, t.data());
        }

        let o = &self.optim;
        if o.m.len() != self.store.len() || o.v.len() != self.store.len() {
            return Err(Error::checkpoint("optimizer", "moment count differs from parameter count"));
        }
        w.extend_from_slice(&o.step.to_le_bytes());
        w.extend_from_slice(&o.base_lr.to_le_bytes());
        w.extend_from_slice(&(o.epoch as u64).to_le_bytes());
        for ((_, name, t), (m, v)) in self.store.iter().zip(o.m.iter().zip(&o.v)) {
            if m.len() != t.len() || v.len() != t.len() {
                return Err(Error::checkpoint(format!("optimizer.{name}"), "moment shape differs from parameter"));
            }
            put_f64s(&mut w, m);
            put_f64s(&mut w, v);
        }
        let sum = Sha256::digest(&w);
        w.extend_from_slice(&sum);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let mut r = Reader { buf: bytes, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported version {version} (expected {VERSION})"),
            ));
        }
        if bytes.len() < 32 + r.pos {
            return Err(Error::checkpoint("checksum", "file truncated"));
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::checkpoint("checksum", "contents do not match the stored digest (truncated or corrupted)"));
        }
        let mut r = Reader { buf: body, pos: r.pos };

        let stored_hash = r.take(32, "config_hash")?.to_vec();
        let meta: Meta = serde_json::from_slice(r.blob("meta")?)
            .map_err(|e| Error::checkpoint("meta", e.to_string()))?;
        if Sha256::digest(meta.run.canonical_json().as_bytes()).as_slice() != stored_hash.as_slice() {
            return Err(Error::checkpoint("config_hash", "stored hash does not match the embedded config"));
        }
        let tokens: Vec<String> = serde_json::from_slice(r.blob("vocab")?)
            .map_err(|e| Error::checkpoint("vocab", e.to_string()))?;
        let vocab = Vocab::from_tokens(tokens).ok_or_else(|| Error::checkpoint("vocab", "malformed token list"))?;

        let count = r.u32("params.count")? as usize;
        let mut store = ParamStore::new();
        for i in 0..count {
            let name_len = r.u32("params.name")? as usize;
            let name = String::from_utf8(r.take(name_len, "params.name")?.to_vec())
                .map_err(|_| Error::checkpoint(format!("params[{i}].name"), "not UTF-8"))?;
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r.f64s(len, &name)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::checkpoint(name.clone(), e.to_string()))?;
            store
                .insert(name.clone(), t)
                .map_err(|e| Error::checkpoint(name.clone(), e.to_string()))?;
        }

        let step = r.u64("optimizer.step")?;
        let base_lr = f64::from_bits(r.u64("optimizer.base_lr")?);
        let epoch = r.u64("optimizer.epoch")? as usize;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, name, t) in store.iter() {
            m.push(r.f64s(t.len(), &format!("optimizer.{name}"))?);
            v.push(r.f64s(t.len(), &format!("optimizer.{name}"))?);
        }
        if r.pos != body.len() {
            return Err(Error::checkpoint("trailer", format!("{} unexpected bytes", body.len() - r.pos)));
        }
        let ck = Checkpoint {
            run: meta.run,
            model: meta.model,
            vocab,
            store,
            optim: OptimState { step, base_lr, epoch, m, v },
        };
        if ck.vocab.len() != ck.model.vocab {
            return Err(Error::DimMismatch {
                name: "vocab".into(),
                expected: ck.model.vocab,
                found: ck.vocab.len(),
            });
        }
        ck.params()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_blob(w: &mut Vec<u8>, blob: &[u8]) {
    w.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    w.extend_from_slice(blob);
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::checkpoint(field, "file truncated")),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, field: &str) -> Result<&'b [u8]> {
        let n = self.u64(field)? as usize;
        self.take(n, field)
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::checkpoint(field, "length overflow"))?, field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
