use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Which part of a model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Base,
    Controller,
    Embedding,
}

impl Partition {
    pub fn code(self) -> u8 {
        match self {
            Partition::Base => 0,
            Partition::Controller => 1,
            Partition::Embedding => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Partition::Base),
            1 => Some(Partition::Controller),
            2 => Some(Partition::Embedding),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Base => "base",
            Partition::Controller => "controller",
            Partition::Embedding => "embedding",
        })
    }
}

/// Set of partitions the optimizer may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub base: bool,
    pub controller: bool,
    pub embedding: bool,
}

impl TrainMask {
    pub const NONE: TrainMask = TrainMask {
        base: false,
        controller: false,
        embedding: false,
    };
    pub const ALL: TrainMask = TrainMask {
        base: true,
        controller: true,
        embedding: true,
    };

    pub fn contains(&self, p: Partition) -> bool {
        match p {
            Partition::Base => self.base,
            Partition::Controller => self.controller,
            Partition::Embedding => self.embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub partition: Partition,
    pub tensor: Tensor,
}

/// Ordered collection of named, partition-tagged tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate tensor name {name}")));
        }
        self.entries.push(NamedTensor {
            name,
            partition,
            tensor,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn at(&self, index: usize) -> &NamedTensor {
        &self.entries[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut NamedTensor {
        &mut self.entries[index]
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn filter(&self, mut keep: impl FnMut(&NamedTensor) -> bool) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// SHA-256 over every tensor's name, shape and value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(tensor_digest_input(e));
        }
        hex::encode(h.finalize())
    }

    /// Per-tensor SHA-256 digests keyed by name.
    pub fn tensor_digests(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|e| {
                let mut h = Sha256::new();
                h.update(tensor_digest_input(e));
                (e.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }

    /// Names and shapes must match one-for-one, in order.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Protocol(format!(
                "tensor count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Protocol(format!(
                    "tensor name mismatch: {} vs {}",
                    a.name, b.name
                )));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Protocol(format!(
                    "shape mismatch on tensor {}: {:?} vs {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a NamedTensor;
    type IntoIter = std::slice::Iter<'a, NamedTensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

impl FromIterator<NamedTensor> for ParamSet {
    fn from_iter<I: IntoIterator<Item = NamedTensor>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

fn tensor_digest_input(e: &NamedTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(e.name.len() + 8 * e.tensor.len() + 16);
    buf.extend_from_slice(e.name.as_bytes());
    buf.push(0);
    for d in e.tensor.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in e.tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}
