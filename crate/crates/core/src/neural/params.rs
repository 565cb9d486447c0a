use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into the flat checkpoint.
    pub offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a tensor drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("consistent shape"))
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect()
    }

    /// Flat little-endian f64 image of every parameter in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(manifest: &[ManifestEntry], bytes: &[u8]) -> Result<Self, NeuralError> {
        if bytes.len() % 8 != 0 {
            return Err(NeuralError::Checkpoint("byte length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = Self::new();
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| NeuralError::Checkpoint(format!("{} runs past the end", e.name)))?
                .to_vec();
            store.add(&e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(store)
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<(), NeuralError> {
        fs::write(bin, self.to_bytes())?;
        fs::write(manifest, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(bin: &Path, manifest: &Path) -> Result<Self, NeuralError> {
        let m: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(manifest)?)?;
        Self::from_bytes(&m, &fs::read(bin)?)
    }
}
