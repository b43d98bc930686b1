//! Binary checkpoint: config, parameters, Adam moments, step and data RNG.
//!
//! Layout, all integers little-endian:
//! `"HIPA"`, u32 version, u32 length + canonical config text, u32 tensor
//! count + tensors, u32 count + Adam tensors (`m.*` then `v.*`), u64 step,
//! 32 bytes of RNG state. A tensor is u16 name length, name, u8 ndim,
//! u32 dims, f32 data.

use std::path::Path;

use hipa_tensor::Tensor;
use indexmap::IndexMap;

use crate::config::HipaConfig;
use crate::error::{HipaError, Result};
use crate::io::write_atomic;
use crate::model::Hipa;
use crate::optim::Adam;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"HIPA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: HipaConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub rng: [u8; 32],
}

fn corrupt(msg: impl Into<String>) -> HipaError {
    HipaError::CorruptCheckpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| HipaError::InvalidSize(format!("tensor name {name} too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_section<'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
        let ndim = self.array::<1>()?[0] as usize;
        let shape = (0..ndim).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_canonical();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        put_section(&mut out, self.params.iter())?;
        let [m, v] = self.adam.moments(&self.params)?;
        let named: Vec<(String, &Tensor)> = m
            .iter()
            .map(|(n, t)| (format!("m.{n}"), t))
            .chain(v.iter().map(|(n, t)| (format!("v.{n}"), t)))
            .collect();
        put_section(&mut out, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| corrupt("bad magic"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = HipaConfig::parse(cfg_text).map_err(|e| corrupt(format!("embedded config: {e}")))?;

        let mut params = ParamStore::new();
        for (name, t) in r.section()? {
            params.insert(name, t).map_err(|e| corrupt(e.to_string()))?;
        }
        let model = Hipa::new(&config).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        model.check_params(&params).map_err(|e| corrupt(e.to_string()))?;

        let moments = r.section()?;
        if moments.len() != 2 * params.len() {
            return Err(corrupt(format!(
                "{} optimizer tensors for {} parameters",
                moments.len(),
                params.len()
            )));
        }
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let expected = params.names().map(|n| ("m.", n)).chain(params.names().map(|n| ("v.", n)));
        for ((name, t), (prefix, pname)) in moments.into_iter().zip(expected) {
            if name.strip_prefix(prefix) != Some(pname) || t.shape() != params.get(pname)?.shape() {
                return Err(corrupt(format!("optimizer tensor {name} does not match {prefix}{pname}")));
            }
            let target = if prefix == "m." { &mut m } else { &mut v };
            target.insert(pname.to_string(), t.data().to_vec());
        }
        let step = u64::from_le_bytes(r.array()?);
        let rng = r.array()?;
        crate::rng::restore(rng).map_err(|e| corrupt(e.to_string()))?;
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let adam = Adam {
            t: step,
            m,
            v,
            ..Adam::new(&ParamStore::new(), config.lr)
        };
        Ok(Self {
            config,
            params,
            adam,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| HipaError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// `ConfigMismatch` naming the first differing key.
    pub fn ensure_config(&self, other: &HipaConfig) -> Result<()> {
        let (a, b) = (self.config.to_canonical(), other.to_canonical());
        match a.lines().zip(b.lines()).find(|(x, y)| x != y) {
            None => Ok(()),
            Some((x, y)) => Err(HipaError::ConfigMismatch(format!("checkpoint has `{x}`, supplied `{y}`"))),
        }
    }
}
