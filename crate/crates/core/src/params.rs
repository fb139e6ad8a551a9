//! Named parameter tensors and the `MFP1` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MFP1" u32:block_count
//! block := u32:name_len name_bytes u32:rank u32:dims[rank] f32:data[prod(dims)]
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFP1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.lookup.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index(name)?;
        Ok(&mut self.tensors[i])
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

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every tensor on `g`; names for which `trainable` is false
    /// become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| if trainable(n) { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams { vars, lookup: self.lookup.clone() }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.numel());
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format { what: "checkpoint", reason: "bad magic".into() });
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format {
                what: "checkpoint",
                reason: format!("tensor name is not utf-8: {e}"),
            })?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            store.insert(name, Tensor { shape, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Graph handles for a [`ParamStore`].
pub struct BoundParams {
    vars: Vec<Var>,
    lookup: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        match self.lookup.get(name) {
            Some(&i) => Ok(self.vars[i]),
            None => arg_err(format!("unknown parameter `{name}`")),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform init in `[-bound, bound]` with `bound = gain * sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor { shape: vec![fan_in, fan_out], data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact_for_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("a.w", glorot(&mut rng, 3, 4, 1.0));
        store.insert("a.b", Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 1e-20]).unwrap());
        store.insert("s", Tensor::scalar(1.0));
        store.round_to_f32();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFP1");
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"XXXX\0\0\0\0".to_vec();
        assert!(ParamStore::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn insert_replaces_existing_names() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        store.insert("x", Tensor::scalar(2.0));
        assert_eq!(store.len(), 1);
        assert_eq!(store.get("x").unwrap().item(), 2.0);
        assert!(store.get("y").is_err());
    }
}
