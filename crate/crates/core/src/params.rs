//! Named, ordered parameter collections.
//!
//! Detector and discriminator weights live in a [`ParamSet`]: a fixed list of
//! named dense arrays. Treating the whole model as one flat vector keeps EMA,
//! SGD and checkpointing as plain arithmetic over matching entries.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// Errors on the first entry whose name or shape differs.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: vec![self.len()],
                found: vec![other.len()],
            });
        }
        for ((n, t), (m, u)) in self.iter().zip(other.iter()) {
            if n != m || t.shape != u.shape {
                return Err(Error::ShapeMismatch {
                    name: n.to_string(),
                    expected: t.shape.clone(),
                    found: u.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise, as a new snapshot.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(t, u)| Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().zip(&u.data).map(|(x, y)| a * x + b * y).collect(),
            })
            .collect();
        Ok(Self {
            names: self.names.clone(),
            tensors,
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (t, u) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in t.data.iter_mut().zip(&u.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(t, u)| t.data.iter().zip(&u.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Name of the first entry holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let wrap = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(wrap)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(wrap)?;
        w.write_u32::<LittleEndian>(self.len() as u32).map_err(wrap)?;
        for (name, t) in self.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(wrap)?;
            w.write_all(name.as_bytes()).map_err(wrap)?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32).map_err(wrap)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64).map_err(wrap)?;
            }
            for &v in &t.data {
                w.write_u64::<LittleEndian>(v.to_bits()).map_err(wrap)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let wrap = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(wrap)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(wrap)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(wrap)?;
        let mut set = Self::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(wrap)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(wrap)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(wrap)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(wrap)?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.read_u64::<LittleEndian>().map(f64::from_bits))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(wrap)?;
            set.push(name, Tensor { shape, data });
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_scalars());
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::read_from(bytes.as_slice())
    }
}

const MAGIC: &[u8; 8] = b"DAODPRM\0";
const FORMAT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0e10]).unwrap());
        p.push("b", Tensor::from_vec(&[3], vec![0.1, 0.2, -0.0]).unwrap());
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p.names(), q.names());
        for (t, u) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(t.shape, u.shape);
            let a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = u.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corrupt_header() {
        assert!(ParamSet::read_from(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
    }

    #[test]
    fn mismatch_names_first_array() {
        let p = sample();
        let mut q = sample();
        q.tensors_mut()[1] = Tensor::zeros(&[4]);
        match p.lincomb(0.5, &q, 0.5) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
