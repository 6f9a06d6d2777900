//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//! `b"GRESNT01"`, `u32` tensor count, then per tensor: `u32` name length,
//! UTF-8 name, `u32` rank, `rank x u64` dims, `prod(dims) x f64` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{NumericsError, Result, Tensor};

const MAGIC: &[u8; 8] = b"GRESNT01";

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(String, Tensor)> = self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        save_named(path, &pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Self::new();
        for (n, t) in load_named(path)? {
            s.add(n, t);
        }
        Ok(s)
    }
}

pub fn save_named(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NumericsError::Checkpoint {
                path: self.path.display().to_string(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    let bad = |msg: String| NumericsError::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name.clone(), Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.gnt");
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3e300]).unwrap());
        s.add("b", Tensor::row_vector(vec![0.25]));
        s.save(&p).unwrap();
        assert_eq!(ParamStore::load(&p).unwrap(), s);
        fs::write(&p, b"GRESNT01\x05\x00").unwrap();
        assert!(ParamStore::load(&p).is_err());
    }
}
