//! Versioned binary checkpoint of named tensors.
//!
//! Layout (little endian): magic `KBSGCKPT`, `u32` version, `u64` step,
//! `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 name, `u32`
//! rank, `u64` dims and `f64` values.

use anyhow::{bail, Context, Result};
use kbsg_core::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"KBSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Joint steps completed.
    pub step: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(step: usize, params: &ParamStore) -> Self {
        let tensors = params
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Self { step, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            bail!("not a checkpoint file");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let step = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).context("tensor name")?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            bail!("{} trailing bytes after the last tensor", bytes.len() - r.pos);
        }
        Ok(Self { step, tensors })
    }

    /// Copies every tensor into `params`. The name sets and shapes must match
    /// exactly.
    pub fn restore(&self, params: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            bail!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.tensors.len(),
                params.len()
            );
        }
        for t in &self.tensors {
            params
                .set(&t.name, &t.shape, t.data.clone())
                .with_context(|| format!("tensor {} {:?}", t.name, t.shape))?;
        }
        Ok(())
    }

    /// Plain-text listing: one `name<TAB>shape<TAB>count` line per tensor.
    pub fn manifest(&self) -> String {
        let mut out = format!("version: {VERSION}\nstep: {}\ntensors: {}\n", self.step, self.tensors.len());
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\n", t.name, dims.join("x"), t.data.len()));
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else { bail!("truncated checkpoint") };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into()?))
    }
}
