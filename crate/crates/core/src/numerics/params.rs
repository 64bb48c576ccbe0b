//! Named parameters, their gradient buffers, and the binary tensor container
//! used for checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tape::{Bindings, Gradients};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Learnable tensors keyed by a unique `/`-separated path, each paired with
/// a gradient buffer of identical shape. Equality compares parameter values
/// only; gradients are scratch space.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor2D>,
    grads: BTreeMap<String, Tensor2D>,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor2D) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.grads
            .insert(path.clone(), Tensor2D::zeros(value.rows(), value.cols()));
        self.params.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor2D> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor2D> {
        self.params.get_mut(path)
    }

    pub fn grad(&self, path: &str) -> Option<&Tensor2D> {
        self.grads.get(path)
    }

    pub fn grad_mut(&mut self, path: &str) -> Option<&mut Tensor2D> {
        self.grads.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `scale · ∂/∂param` from a backward pass into the gradient buffers.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients, scale: f64) {
        for (path, var) in bindings.iter() {
            if let (Some(g), Some(buf)) = (grads.get(var), self.grads.get_mut(path)) {
                for (b, v) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += scale * v;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor2D::is_finite)
    }
}

const MAGIC: &[u8; 8] = b"FCWTNSR\0";
const VERSION: u32 = 1;

/// Self-describing tensor container: a UTF-8 metadata document plus named
/// `f64` tensors. All integers and floats are little-endian.
///
/// Layout: magic `FCWTNSR\0`, `u32` version, `u64` metadata length, metadata
/// bytes, `u64` entry count, then per entry `u32` path length, path bytes,
/// `u64` rows, `u64` cols and `rows·cols` `f64` values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: String,
    pub entries: BTreeMap<String, Tensor2D>,
}

impl TensorContainer {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (path, t) in &self.entries {
            w.write_all(&(path.len() as u32).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let fail = |detail: &str| Error::Format {
            kind: "tensor container",
            location: format!("{} byte buffer", bytes.len()),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
        if &magic != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = read_u32(&mut r).ok_or_else(|| fail("truncated header"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r).ok_or_else(|| fail("truncated header"))? as usize;
        let meta = take(&mut r, meta_len).ok_or_else(|| fail("truncated metadata"))?;
        let metadata = String::from_utf8(meta.to_vec()).map_err(|_| fail("metadata not UTF-8"))?;
        let count = read_u64(&mut r).ok_or_else(|| fail("truncated entry count"))?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let plen = read_u32(&mut r).ok_or_else(|| fail("truncated entry"))? as usize;
            let path = take(&mut r, plen).ok_or_else(|| fail("truncated path"))?;
            let path = String::from_utf8(path.to_vec()).map_err(|_| fail("path not UTF-8"))?;
            let rows = read_u64(&mut r).ok_or_else(|| fail("truncated shape"))? as usize;
            let cols = read_u64(&mut r).ok_or_else(|| fail("truncated shape"))? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| fail("tensor extends past end of data"))?;
            let raw = take(&mut r, n * 8).expect("length checked above");
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.insert(path, Tensor2D::from_vec(rows, cols, data)?);
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { metadata, entries })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head)
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    take(r, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    take(r, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}
