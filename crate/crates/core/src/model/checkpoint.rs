//! Little-endian parameter archive.
//!
//! Layout: `b"SMTK"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u32` rank,
//! `u64` dims and a `u64` byte offset into the data section, which follows
//! the directory and holds the raw arrays back to back.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"SMTK";
pub const VERSION: u32 = 1;

/// One decoded array, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar>(mut w: impl Write, params: &impl ParamSet<T>) -> Result<()> {
    let mut dir = Vec::new();
    let mut data = Vec::new();
    let mut count = 0u32;
    params.visit("", &mut |name, shape, values| {
        count += 1;
        dir.extend_from_slice(&(name.len() as u32).to_le_bytes());
        dir.extend_from_slice(name.as_bytes());
        dir.push(T::DTYPE.code());
        dir.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            dir.extend_from_slice(&(d as u64).to_le_bytes());
        }
        dir.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in values {
            v.write_le(&mut data);
        }
    });
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    w.write_all(&dir).map_err(io)?;
    w.write_all(&data).map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut heads = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| corrupt("entry name is not UTF-8"))?;
        let code = c.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("unknown dtype {code} for {name}")))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        heads.push((name, dtype, shape, offset));
    }
    let data = &buf[c.pos..];
    heads
        .into_iter()
        .map(|(name, dtype, shape, offset)| {
            let n: usize = shape.iter().product();
            let bytes = n * dtype.size();
            let slice = offset
                .checked_add(bytes)
                .and_then(|end| data.get(offset..end))
                .ok_or_else(|| corrupt(format!("data for {name} lies outside the file")))?;
            let values = match dtype {
                DType::F32 => slice.chunks_exact(4).map(|b| f32::read_le(b).as_f64()).collect(),
                DType::F64 => slice.chunks_exact(8).map(f64::read_le).collect(),
            };
            Ok(Entry {
                name,
                dtype,
                shape,
                values,
            })
        })
        .collect()
}

/// Copies entries into `params` by name; every parameter must be present
/// with a matching shape.
pub fn load_entries<T: Scalar>(entries: &[Entry], params: &mut impl ParamSet<T>) -> Result<()> {
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut err = None;
    let mut used = 0;
    params.visit_mut("", &mut |name, shape, values| {
        if err.is_some() {
            return;
        }
        match by_name.get(name) {
            None => err = Some(corrupt(format!("missing parameter {name}"))),
            Some(e) if e.shape != shape => {
                err = Some(corrupt(format!(
                    "{name}: stored shape {:?}, expected {shape:?}",
                    e.shape
                )))
            }
            Some(e) => {
                used += 1;
                for (v, &s) in values.iter_mut().zip(&e.values) {
                    *v = T::c(s);
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != entries.len() {
        return Err(corrupt(format!(
            "{} stored arrays do not belong to this model",
            entries.len() - used
        )));
    }
    Ok(())
}

pub fn save<T: Scalar>(path: &Path, params: &impl ParamSet<T>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), params)
}

pub fn load<T: Scalar>(path: &Path, params: &mut impl ParamSet<T>) -> Result<()> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_entries(&read_checkpoint(std::io::BufReader::new(f))?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Tensor};

    struct Pair {
        a: Tensor<f32>,
        b: Linear<f32>,
    }

    impl ParamSet<f32> for Pair {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
            self.a.visit(&crate::nn::join(prefix, "a"), f);
            self.b.visit(&crate::nn::join(prefix, "b"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
            self.a.visit_mut(&crate::nn::join(prefix, "a"), f);
            self.b.visit_mut(&crate::nn::join(prefix, "b"), f);
        }
    }

    fn pair() -> Pair {
        let mut b = Linear::zeros(2, 1, true);
        b.weight = vec![0.5, -1.25];
        b.bias = Some(vec![3.0]);
        Pair {
            a: Tensor::from_vec(&[3], vec![1.0, 2.0, 4.0]),
            b,
        }
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0])).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"SMTK");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        // A bare tensor visited with an empty prefix has an empty name.
        expect.extend_from_slice(&0u32.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&0u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn roundtrip_and_names() {
        let p = pair();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let entries = read_checkpoint(&buf[..]).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b.weight", "b.bias"]);
        assert_eq!(entries[1].shape, vec![1, 2]);
        let mut q = pair();
        q.a.data = vec![0.0; 3];
        q.b.weight = vec![0.0; 2];
        load_entries(&entries, &mut q).unwrap();
        assert_eq!(q.a, p.a);
        assert_eq!(q.b, p.b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &pair()).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &pair()).unwrap();
        let entries = read_checkpoint(&buf[..]).unwrap();
        let mut other = pair();
        other.a = Tensor::zeros(&[4]);
        assert!(load_entries(&entries, &mut other).is_err());
    }
}
