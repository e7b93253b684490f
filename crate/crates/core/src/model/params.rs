use std::io::{Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointError, Element, NamedTensor, Tensor};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint has {got} tensors, model expects {expected}")]
    Count { got: usize, expected: usize },
    #[error("checkpoint tensor {index} is {got:?}, model expects {expected:?}")]
    Mismatch {
        index: usize,
        got: String,
        expected: String,
    },
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Params<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                tensor: t.cast(),
            })
            .collect()
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<(), ParamError> {
        Ok(write_checkpoint(w, &self.to_named())?)
    }

    /// Replaces values from a checkpoint whose names and shapes must match.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<(), ParamError> {
        let loaded = read_checkpoint(r)?;
        self.load_named(&loaded)
    }

    pub fn load_named(&mut self, loaded: &[NamedTensor]) -> Result<(), ParamError> {
        if loaded.len() != self.entries.len() {
            return Err(ParamError::Count {
                got: loaded.len(),
                expected: self.entries.len(),
            });
        }
        for (index, (nt, (name, t))) in loaded.iter().zip(&self.entries).enumerate() {
            if &nt.name != name || nt.tensor.shape() != t.shape() {
                return Err(ParamError::Mismatch {
                    index,
                    got: format!("{} {:?}", nt.name, nt.tensor.shape()),
                    expected: format!("{name} {:?}", t.shape()),
                });
            }
        }
        for (nt, (_, t)) in loaded.iter().zip(&mut self.entries) {
            *t = nt.tensor.cast();
        }
        Ok(())
    }
}
