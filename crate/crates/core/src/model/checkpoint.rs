//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic "AREC" | u32 version
//! spec: u8 method | u8 meta | u64 h | u64 c | u64 n | u64 v | u64 u
//! u64 tensor count, then per tensor:
//!     u32 name length | name | u32 rank | u64 dims[rank] | f64 data[numel]
//! u64 counter count, then per counter: u32 name length | name | u64 value
//! ```

use std::fs;
use std::path::Path;

use super::{Method, ModelSpec};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::metanet::MetaNetKind;
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AREC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Spec, named tensors, and named integer counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Tensor)>,
    pub counters: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let s = &self.spec;
        w.u8(Method::ALL.iter().position(|&m| m == s.method).unwrap() as u8);
        w.u8(MetaNetKind::ALL.iter().position(|&m| m == s.meta).unwrap() as u8);
        for x in [s.h, s.c, s.n, s.v, s.u] {
            w.u64(x as u64);
        }
        w.u64(self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &x in t.data() {
                w.f64(x);
            }
        }
        w.u64(self.counters.len() as u64);
        for (name, v) in &self.counters {
            w.str(name);
            w.u64(*v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let method = *Method::ALL
            .get(r.u8("spec")? as usize)
            .ok_or_else(|| Error::Format("unknown method code".into()))?;
        let meta = *MetaNetKind::ALL
            .get(r.u8("spec")? as usize)
            .ok_or_else(|| Error::Format("unknown meta-network code".into()))?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = to_usize(r.u64("spec")?)?;
        }
        let [h, c, n, v, u] = dims;
        let spec = ModelSpec { method, meta, h, c, n, v, u };
        spec.validate()?;

        let count = r.u64("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(to_usize(r.u64("tensor shape")?)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let raw = r.bytes(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, tensor));
        }
        let count = r.u64("counter count")?;
        let mut counters = Vec::new();
        for _ in 0..count {
            let name = r.str("counter name")?;
            counters.push((name, r.u64("counter value")?));
        }
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { spec, tensors, counters })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn to_usize(x: u64) -> Result<usize> {
    usize::try_from(x).map_err(|_| Error::Format(format!("value {x} does not fit in memory")))
}
