//! Binary checkpoints: header, config hash, step, named parameters and
//! Adam moments, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CIFTTSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(config_hash: &str, step: u64, store: &ParamStore, adam: &Adam) -> Self {
        Checkpoint {
            config_hash: config_hash.to_string(),
            step,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Copies the saved values into a store built for the same model, and
    /// returns the optimizer state.
    pub fn restore(&self, store: &mut ParamStore, adam: AdamConfig) -> Result<Adam> {
        if self.params.len() != store.len() {
            return Err(Error::usage(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, t)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&self.params)
        {
            if store.name(id) != name {
                return Err(Error::usage(format!(
                    "checkpoint parameter {name} where the model has {}",
                    store.name(id)
                )));
            }
            store.set(id, t.clone())?;
        }
        Ok(Adam {
            config: adam,
            step: self.adam_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        })
    }

    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::usage(format!(
                "checkpoint was trained with config hash {}, current config hashes to {expected}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut b, &self.config_hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut b, t.data());
        }
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            put_f64s(&mut b, m);
            put_f64s(&mut b, v);
        }
        b
    }

    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(8, &format!("unsupported version {version}")));
        }
        let config_hash = r.string()?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let nd = r.u32()? as usize;
            if nd > 8 {
                return Err(r.err(r.pos - 4, &format!("{name}: implausible rank {nd}")));
            }
            let shape: Vec<usize> = (0..nd)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.err(r.pos, &format!("{name}: shape overflow")))?;
            let data = r.f64s(numel)?;
            params.push((name, Tensor::from_parts(shape, data)));
        }
        let adam_step = r.u64()?;
        let mut adam_m = Vec::with_capacity(n);
        let mut adam_v = Vec::with_capacity(n);
        for (_, t) in &params {
            adam_m.push(r.f64s(t.numel())?);
            adam_v.push(r.f64s(t.numel())?);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            params,
            adam_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn err(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, &format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.err(at, "invalid UTF-8 name"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(self.pos, "length overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
