use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, trainable row-major matrix with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!("parameter `{name}` must be 1-D or 2-D, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateId(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add a backward pass's gradients into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (i, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let t = &mut self.tensors[i];
            match g {
                ParamGrad::Dense(d) => {
                    for (a, b) in t.grad.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                ParamGrad::Rows { cols, rows } => {
                    for (&r, d) in rows {
                        let dst = &mut t.grad[r * cols..(r + 1) * cols];
                        for (a, b) in dst.iter_mut().zip(d) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    /// Copy values from another store for every parameter present in both.
    pub fn copy_values_from(&mut self, other: &ParamStore, from_prefix: &str, to_prefix: &str) -> Result<()> {
        for src in &other.tensors {
            let Some(rest) = src.name.strip_prefix(from_prefix) else { continue };
            let name = format!("{to_prefix}{rest}");
            let id = self
                .id(&name)
                .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))?;
            let dst = self.get_mut(id);
            if dst.shape != src.shape {
                return Err(Error::Shape(format!(
                    "`{name}`: {:?} vs {:?}",
                    dst.shape, src.shape
                )));
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .tensors
                .iter()
                .map(|t| CheckpointEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_version()?;
        let mut store = ParamStore::new();
        for e in &ckpt.params {
            store.add(&e.name, &e.shape, e.values.clone())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized parameters: name, shape and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn check_version(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }
}

/// Gradient of one parameter from a single backward pass.
///
/// Embedding lookups touch few rows of large tables, so their gradients are
/// kept row-sparse.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl ParamGrad {
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(d) => d.clone(),
            ParamGrad::Rows { cols, rows } => {
                let mut out = vec![0.0; len];
                for (&r, d) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(d);
                }
                out
            }
        }
    }
}
