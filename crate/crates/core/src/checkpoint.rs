//! Little-endian checkpoint container.
//!
//! ```text
//! magic    8 bytes  "BSPKCKPT"
//! version  u32      1
//! n_meta   u32      then per entry: u32 key_len, key, u32 val_len, val (UTF-8)
//! n_tensor u32      then per tensor: u32 name_len, name, u32 rank,
//!                   rank × u64 dims, prod(dims) × f64
//! ```
//!
//! Model checkpoints store `kind` and `model.<key>` metadata, parameters
//! under their store names, and optionally Adam moments as
//! `adam.m.<name>` / `adam.v.<name>` with the step count in `adam.t`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind, ParamStore};
use crate::numerics::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"BSPKCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("non UTF-8 string before byte {}", self.pos)))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a bispik checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_meta = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
                shape.push(d);
            }
            let bytes = count
                .checked_mul(8)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let raw = r.take(bytes)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let b = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&b)
    }
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

pub fn model_to_checkpoint(model: &Model, adam: Option<&AdamState>) -> Checkpoint {
    let mut meta = vec![("kind".to_string(), model.kind.as_str().to_string())];
    meta.extend(model.cfg.to_kv().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
    let mut tensors: Vec<(String, Tensor)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    if let Some(a) = adam {
        meta.push(("adam.t".into(), a.t.to_string()));
        for (i, (n, _)) in model.params.iter().enumerate() {
            tensors.push((format!("{ADAM_M}{n}"), a.m[i].clone()));
        }
        for (i, (n, _)) in model.params.iter().enumerate() {
            tensors.push((format!("{ADAM_V}{n}"), a.v[i].clone()));
        }
    }
    Checkpoint { meta, tensors }
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Model, Option<AdamState>)> {
    let kind = ModelKind::parse(ck.meta("kind").ok_or_else(|| Error::Format("checkpoint has no `kind`".into()))?)?;
    let mut cfg = ModelConfig::default();
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("model.") {
            cfg.set(key, v).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        }
    }
    let mut params = ParamStore::new();
    let mut moments: Vec<(&str, &Tensor)> = Vec::new();
    for (n, t) in &ck.tensors {
        if n.starts_with(ADAM_M) || n.starts_with(ADAM_V) {
            moments.push((n, t));
        } else {
            params.insert(n.clone(), t.clone());
        }
    }
    let model = Model { kind, cfg, params };
    model.validate()?;
    let adam = match ck.meta("adam.t") {
        None => None,
        Some(t) => {
            let t: u64 = t.parse().map_err(|_| Error::Format(format!("bad adam.t `{t}`")))?;
            let find = |prefix: &str, name: &str| -> Result<Tensor> {
                let key = format!("{prefix}{name}");
                moments
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor `{key}`")))
            };
            let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
            let m = names.iter().map(|n| find(ADAM_M, n)).collect::<Result<_>>()?;
            let v = names.iter().map(|n| find(ADAM_V, n)).collect::<Result<_>>()?;
            Some(AdamState { m, v, t })
        }
    };
    Ok((model, adam))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    model_to_checkpoint(model, adam).write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Option<AdamState>)> {
    model_from_checkpoint(&Checkpoint::read(path)?)
}
