//! Little-endian binary helpers shared by the artifact formats.
//!
//! Every artifact starts with a four-byte magic followed by a `u32` format
//! version. Integers are `u64`, reals are `f64`, matrices are column-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct BinWriter {
    out: BufWriter<fs::File>,
}

impl BinWriter {
    pub fn create(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut w = Self {
            out: BufWriter::new(fs::File::create(path)?),
        };
        w.out.write_all(magic)?;
        w.u32(FORMAT_VERSION)?;
        Ok(w)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: usize) -> Result<()> {
        Ok(self.out.write_all(&(v as u64).to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }

    pub fn reals<T: Scalar>(&mut self, values: impl IntoIterator<Item = T>) -> Result<()> {
        for v in values {
            self.f64(v.as_f64())?;
        }
        Ok(())
    }

    pub fn matrix<T: Scalar>(&mut self, m: &DMatrix<T>) -> Result<()> {
        // nalgebra storage is already column-major
        self.reals(m.as_slice().iter().copied())
    }

    pub fn finish(mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

pub(crate) struct BinReader {
    bytes: Vec<u8>,
    pos: usize,
    path: PathBuf,
}

impl BinReader {
    pub fn open(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        let found = r.take(4)?.to_vec();
        if found != magic {
            return Err(r.malformed(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                path: self.path.clone(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.malformed(format!("count {v} out of range")))
    }

    /// Reads a count and checks that at least `count * elem_bytes` bytes follow.
    pub fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let c = self.u64()?;
        match c.checked_mul(elem_bytes) {
            Some(b) if b <= self.remaining() => Ok(c),
            _ => Err(self.malformed(format!("declared count {c} exceeds file size"))),
        }
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        if n.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(self.malformed(format!("expected {n} reals, file too short")));
        }
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }

    pub fn vector<T: Scalar>(&mut self, n: usize) -> Result<DVector<T>> {
        Ok(DVector::from_vec(self.reals(n)?))
    }

    pub fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<DMatrix<T>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.malformed("matrix size overflow"))?;
        Ok(DMatrix::from_vec(rows, cols, self.reals(n)?))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
