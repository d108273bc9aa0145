//! Binary container for named arrays, used for model checkpoints and scene
//! exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMOE" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: UTF-8 | dtype: u8 | rank: u32 |
//!             rank × extent: u64 | values )
//! ```
//!
//! Dtype tags: 0 = f32, 1 = f64, 2 = i64, 3 = u8.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::adapter::LandMoeModel;
use crate::config::LandMoeConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"LMOE";
pub const VERSION: u32 = 1;

const CONFIG_RECORD: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Stored as f32 or f64 following the tensor's dtype.
    Float(Tensor),
    Int(Vec<usize>, Vec<i64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::Float(t) if t.dtype() == DType::F32 => 0,
            Payload::Float(_) => 1,
            Payload::Int(..) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Payload::Float(t) => t.shape().to_vec(),
            Payload::Int(s, _) => s.clone(),
            Payload::Bytes(b) => vec![b.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn float(name: impl Into<String>, t: Tensor) -> Self {
        Record {
            name: name.into(),
            payload: Payload::Float(t),
        }
    }

    pub fn int(name: impl Into<String>, shape: &[usize], data: Vec<i64>) -> Self {
        Record {
            name: name.into(),
            payload: Payload::Int(shape.to_vec(), data),
        }
    }

    pub fn bytes(name: impl Into<String>, data: Vec<u8>) -> Self {
        Record {
            name: name.into(),
            payload: Payload::Bytes(data),
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.payload.tag()])?;
        let shape = r.payload.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for e in &shape {
            w.write_all(&(*e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        match &r.payload {
            Payload::Float(t) if t.dtype() == DType::F32 => {
                t.data().iter().for_each(|&v| buf.extend((v as f32).to_le_bytes()));
            }
            Payload::Float(t) => t.data().iter().for_each(|v| buf.extend(v.to_le_bytes())),
            Payload::Int(_, d) => d.iter().for_each(|v| buf.extend(v.to_le_bytes())),
            Payload::Bytes(b) => buf.extend_from_slice(b),
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, not a LMOE container".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "container version {version}, this build reads {VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let tag = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("`{name}`: extent overflow")))?;
        let width = match tag {
            0 => 4,
            1 | 2 => 8,
            3 => 1,
            t => return Err(Error::Format(format!("`{name}`: unknown dtype tag {t}"))),
        };
        let bytes = c.take(
            numel
                .checked_mul(width)
                .ok_or_else(|| Error::Format(format!("`{name}`: size overflow")))?,
        )?;
        let payload = match tag {
            0 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                Payload::Float(float_tensor(&name, &shape, data, DType::F32)?)
            }
            1 => {
                let data = bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Payload::Float(float_tensor(&name, &shape, data, DType::F64)?)
            }
            2 => Payload::Int(
                shape,
                bytes
                    .chunks_exact(8)
                    .map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            _ => {
                if rank != 1 {
                    return Err(Error::Format(format!("`{name}`: byte records are 1-D")));
                }
                Payload::Bytes(bytes.to_vec())
            }
        };
        out.push(Record { name, payload });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

fn float_tensor(name: &str, shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Tensor> {
    Tensor::new(shape, data)
        .map(|t| t.to_dtype(dtype))
        .map_err(|e| Error::Format(format!("`{name}`: {e}")))
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    read_records(fs::File::open(path)?)
}

/// The configuration record followed by every parameter in registry order.
pub fn model_records(model: &LandMoeModel) -> Vec<Record> {
    let mut out = vec![Record::bytes(CONFIG_RECORD, model.cfg.to_kv().into_bytes())];
    for (_, name, t) in model.store.iter() {
        let plain = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec(), t.dtype());
        out.push(Record::float(name, plain));
    }
    out
}

pub fn model_from_records(records: &[Record]) -> Result<LandMoeModel> {
    let Some(Record {
        payload: Payload::Bytes(cfg_bytes),
        ..
    }) = records.iter().find(|r| r.name == CONFIG_RECORD)
    else {
        return Err(Error::Format("checkpoint carries no model configuration".into()));
    };
    let text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Format("model configuration is not UTF-8".into()))?;
    let cfg = LandMoeConfig::from_kv(text)?;
    let mut model = LandMoeModel::new(cfg, 0)?;
    let mut params = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| !r.name.starts_with("meta.")) {
        match &r.payload {
            Payload::Float(t) => params.push((r.name.clone(), t.clone())),
            _ => return Err(Error::Format(format!("parameter `{}` is not floating point", r.name))),
        }
    }
    model.load_params(&params)?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &LandMoeModel) -> Result<()> {
    save_records(path, &model_records(model))
}

pub fn load_model(path: &Path) -> Result<LandMoeModel> {
    model_from_records(&load_records(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_bit_exact() {
        let recs = vec![
            Record::float("a", Tensor::new(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            Record::float("b", Tensor::new(&[3], vec![0.5, 0.25, -3.0]).unwrap().to_dtype(DType::F32)),
            Record::int("labels", &[2, 1], vec![5, -7]),
            Record::bytes("meta", b"x=1\n".to_vec()),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let Payload::Float(t) = &back[0].payload else { panic!() };
        assert_eq!(t.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[Record::bytes("m", vec![1, 2, 3])]).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_records(bad.as_slice()), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_records(bad.as_slice()), Err(Error::Format(_))));

        assert!(read_records(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_records(long.as_slice()).is_err());
    }
}
