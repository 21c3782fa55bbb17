//! Named parameter tensors and their binary checkpoint.
//!
//! Checkpoint layout, little-endian: magic `DAPM`, u32 version, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims,
//! f32 payload.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NetError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DAPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NetError::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.count() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(NetError::Format { offset: 0, message: "magic is not DAPM".into() });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Format { offset: at, message: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| NetError::Format { offset: at + 4, message: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(NetError::Format { offset: r.pos - 4, message: format!("rank {rank} of {name}") });
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store
                .insert(&name, Tensor::new(shape, data)?)
                .map_err(|e| NetError::Format { offset: at, message: e.to_string() })?;
        }
        if r.pos != bytes.len() {
            return Err(NetError::Format { offset: r.pos, message: "trailing bytes".into() });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| NetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| NetError::io(path, e))?)
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.names != other.names {
            return Err(NetError::invalid("parameter names differ from the model layout"));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(NetError::shape(format!("{}: {:?} vs {:?}", self.names[i], a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NetError::Format { offset: self.pos, message: format!("truncated: need {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Seeded initializer: He-normal weights, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Adds `{name}.w` (`[out, in, k, k]`) and `{name}.b`. `gain` scales the
    /// He standard deviation.
    pub fn conv<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(normal.sample(&mut self.rng)));
        store.insert(&format!("{name}.w"), w)?;
        store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::new(vec![2, 1, 1, 1], vec![1.5, -2.25]).unwrap()).unwrap();
        s.insert("a.b", Tensor::new(vec![2], vec![0.0, 3.0]).unwrap()).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"DAPM");
        assert_eq!(ParamStore::<f32>::from_bytes(&bytes).unwrap(), s);
        let err = ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, NetError::Format { .. }));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("x", Tensor::zeros(&[1])).is_err());
    }
}
