//! Versioned little-endian binary containers for trained weights.
//!
//! Every file starts with an 8-byte magic and a `u32` format version; tensors
//! are stored as `rows: u32, cols: u32` followed by `rows·cols` f64 values.

use std::io::{Read, Write};

use crate::error::{Result, VflError};
use crate::nn::{Activation, DenseLayer};
use crate::tensor::Tensor;

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
    }
}

fn activation_from_code(c: u8) -> Result<Activation> {
    match c {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Sigmoid),
        other => Err(VflError::Decode(format!("unknown activation code {other}"))),
    }
}

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W, magic: &[u8; 8], version: u32) -> Result<Self> {
        let mut w = BinWriter { inner };
        w.inner.write_all(magic)?;
        w.u32(version)?;
        Ok(w)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| VflError::invalid("length exceeds u32"))?;
        self.u32(n)
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.len(t.rows())?;
        self.len(t.cols())?;
        t.data().iter().try_for_each(|&x| self.f64(x))
    }

    pub fn dense(&mut self, l: &DenseLayer) -> Result<()> {
        self.u8(activation_code(l.activation))?;
        self.tensor(&l.weight)?;
        self.tensor(&l.bias)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct BinReader<R: Read> {
    inner: R,
    pub version: u32,
}

/// Guards allocation against corrupted length fields.
const MAX_ELEMENTS: usize = 1 << 28;

impl<R: Read> BinReader<R> {
    pub fn new(mut inner: R, magic: &[u8; 8]) -> Result<Self> {
        let mut m = [0u8; 8];
        inner
            .read_exact(&mut m)
            .map_err(|_| VflError::Decode("file too short for header".into()))?;
        if &m != magic {
            return Err(VflError::Decode(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = BinReader { inner, version: 0 };
        r.version = r.u32()?;
        Ok(r)
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| VflError::Decode("unexpected end of file".into()))?;
        Ok(b)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > MAX_ELEMENTS {
            return Err(VflError::Decode(format!("implausible length {n}")));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.len()?;
        let cols = self.len()?;
        if rows.saturating_mul(cols) > MAX_ELEMENTS {
            return Err(VflError::Decode(format!("implausible shape {rows}x{cols}")));
        }
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::from_vec(rows, cols, data)
    }

    pub fn dense(&mut self) -> Result<DenseLayer> {
        let act = activation_from_code(self.u8()?)?;
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        DenseLayer::from_parts(weight, bias, act)
            .map_err(|e| VflError::Decode(format!("inconsistent layer: {e}")))
    }

    /// Fails if any bytes remain.
    pub fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(VflError::Decode("trailing bytes".into())),
        }
    }
}
