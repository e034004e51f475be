//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//! `"MMVQ"`, version `u32`, entry count `u32`, then per entry: name length
//! `u16`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64, 2 = raw bytes), rank
//! `u8`, dims as `u32`, raw payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMVQ";
pub const FORMAT_VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl EntryData {
    pub fn dtype(&self) -> u8 {
        match self {
            EntryData::F32(_) => DTYPE_F32,
            EntryData::F64(_) => DTYPE_F64,
            EntryData::Bytes(_) => DTYPE_BYTES,
        }
    }
}

/// Converts between a generic tensor and a container entry.
pub trait ContainerScalar: Scalar {
    fn wrap(t: Tensor<Self>) -> EntryData;
    fn unwrap(e: &EntryData) -> Option<&Tensor<Self>>;
}

impl ContainerScalar for f32 {
    fn wrap(t: Tensor<f32>) -> EntryData {
        EntryData::F32(t)
    }
    fn unwrap(e: &EntryData) -> Option<&Tensor<f32>> {
        match e {
            EntryData::F32(t) => Some(t),
            _ => None,
        }
    }
}

impl ContainerScalar for f64 {
    fn wrap(t: Tensor<f64>) -> EntryData {
        EntryData::F64(t)
    }
    fn unwrap(e: &EntryData) -> Option<&Tensor<f64>> {
        match e {
            EntryData::F64(t) => Some(t),
            _ => None,
        }
    }
}

/// Ordered list of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, EntryData)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, data: EntryData) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = data;
        } else {
            self.entries.push((name, data));
        }
    }

    pub fn insert_tensor<T: ContainerScalar>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.insert(name, T::wrap(t));
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn tensor<T: ContainerScalar>(&self, name: &str) -> Result<&Tensor<T>> {
        let e = self.get(name).ok_or_else(|| bad(format!("missing entry `{name}`")))?;
        T::unwrap(e).ok_or_else(|| bad(format!("entry `{name}` has dtype {}", e.dtype())))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(EntryData::Bytes(b)) => Ok(b),
            Some(e) => Err(bad(format!("entry `{name}` has dtype {}", e.dtype()))),
            None => Err(bad(format!("missing entry `{name}`"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores every parameter value under `{prefix}{name}`.
    pub fn insert_params<T: ContainerScalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.insert_tensor(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}` entries.
    pub fn load_params<T: ContainerScalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.tensor::<T>(&format!("{prefix}{name}"))?.clone();
            store.set_value(id, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len()).map_err(|_| bad(format!("name too long: {name}")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(data.dtype());
            match data {
                EntryData::F32(t) => write_tensor(&mut out, t)?,
                EntryData::F64(t) => write_tensor(&mut out, t)?,
                EntryData::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match dtype {
                DTYPE_F32 => EntryData::F32(read_tensor(&mut r, &dims, numel)?),
                DTYPE_F64 => EntryData::F64(read_tensor(&mut r, &dims, numel)?),
                DTYPE_BYTES => EntryData::Bytes(r.take(numel)?.to_vec()),
                other => return Err(bad(format!("unknown dtype {other} for `{name}`"))),
            };
            c.entries.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(c)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>, dims: &[usize], numel: usize) -> Result<Tensor<T>> {
    let width = std::mem::size_of::<T>();
    let raw = r.take(numel * width)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(dims, data)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
