//! Binary checkpoint records.
//!
//! Little-endian throughout:
//!
//! ```text
//! "BA3C"            magic, 4 bytes
//! version           u32
//! tensor count      u32
//! per tensor:
//!   name length     u16, then UTF-8 name bytes
//!   dtype           u8 (0 = F32, 1 = F64)
//!   rank            u8
//!   extents         u32 each
//!   data            raw scalars
//! ```
//!
//! Layout tags are not stored; rank-4 records load as NCHW, which is the
//! `[out_c, in_c, k_h, k_w]` convention of conv weights.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, ParamSet};
use crate::optim::AdamState;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Layout, Tensor};

pub const MAGIC: &[u8; 4] = b"BA3C";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        for &v in t.data() {
            v.extend_le_bytes(&mut bytes);
        }
        Record {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn scalar_f64(name: impl Into<String>, v: f64) -> Self {
        let t = Tensor::<f64>::from_vec(&[1], Layout::Flat, vec![v]).expect("1-element tensor");
        Self::from_tensor(name, &t)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "record {} has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size_of();
        let data: Vec<T> = self.bytes.chunks_exact(size).map(T::from_le_slice).collect();
        let layout = if self.shape.len() == 4 { Layout::Nchw } else { Layout::Flat };
        Tensor::from_vec(&self.shape, layout, data)
    }

    pub fn as_scalar_f64(&self) -> Result<f64> {
        let t = self.to_tensor::<f64>()?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("record {} is not a scalar", self.name))),
        }
    }
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {}", r.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(r.dtype.code());
        buf.push(r.shape.len() as u8);
        for &e in &r.shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Checkpoint(format!("extent {e} exceeds u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        buf.extend_from_slice(&r.bytes);
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_records(mut r: impl Read) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let code = cur.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = cur.take(len * dtype.size_of())?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            buf.len() - cur.pos
        )));
    }
    Ok(records)
}

/// A model's weights and, optionally, the optimizer state that goes with them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    pub params: ModelParams<T>,
    pub adam: Option<AdamMoments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

const PARAM_PREFIX: &str = "param.";
const META_VERSION: &str = "meta.version";

fn u64_record(r: &Record) -> Result<u64> {
    let v = r.as_scalar_f64()?;
    if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
        return Err(Error::Checkpoint(format!("record {} holds {v}, not a count", r.name)));
    }
    Ok(v as u64)
}

pub fn model_records<T: Scalar>(params: &ModelParams<T>, adam: Option<&AdamState<T>>) -> Vec<Record> {
    let mut recs = vec![Record::scalar_f64(META_VERSION, params.version() as f64)];
    recs.extend(params.tensors.to_records(PARAM_PREFIX));
    if let Some(a) = adam {
        recs.extend(a.to_records());
    }
    recs
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, &model_records(params, adam))?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn parse_training_state<T: Scalar>(records: &[Record]) -> Result<TrainingState<T>> {
    let mut version = None;
    let mut tensors = ParamSet::new();
    let (mut m, mut v, mut t) = (ParamSet::new(), ParamSet::new(), None);
    for r in records {
        if r.name == META_VERSION {
            version = Some(u64_record(r)?);
        } else if r.name == "adam.t" {
            t = Some(u64_record(r)?);
        } else if let Some(n) = r.name.strip_prefix(PARAM_PREFIX) {
            tensors.insert(n, r.to_tensor()?)?;
        } else if let Some(n) = r.name.strip_prefix("adam.m.") {
            m.insert(n, r.to_tensor()?)?;
        } else if let Some(n) = r.name.strip_prefix("adam.v.") {
            v.insert(n, r.to_tensor()?)?;
        } else {
            return Err(Error::Checkpoint(format!("unexpected record {:?}", r.name)));
        }
    }
    let version = version.ok_or_else(|| Error::Checkpoint(format!("missing {META_VERSION}")))?;
    if tensors.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no parameters".into()));
    }
    let adam = match t {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Checkpoint("optimizer moments without adam.t".into())),
        Some(t) => {
            tensors.check_matches(&m).map_err(|e| Error::Checkpoint(format!("adam.m: {e}")))?;
            tensors.check_matches(&v).map_err(|e| Error::Checkpoint(format!("adam.v: {e}")))?;
            Some(AdamMoments { m, v, t })
        }
    };
    Ok(TrainingState {
        params: ModelParams::with_version(tensors, version),
        adam,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainingState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    parse_training_state(&read_records(bytes.as_slice())?)
}
