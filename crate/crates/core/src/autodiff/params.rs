use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named parameter tensors for one trainable group.
///
/// Each store carries a process-unique id so a tape can tell parameters of
/// an online network from those of its target copy. Cloning yields a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Serializable snapshot of one tensor: key, shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a tensor. Panics on duplicate names; networks are built once
    /// at construction time so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.raw_dim());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients that belong to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (store, id, g) in grads.param_grads() {
            if store == self.uid {
                self.params[id.0].grad += g;
            }
        }
    }

    pub(crate) fn set_grad(&mut self, id: ParamId, grad: Tensor) {
        self.params[id.0].grad = grad;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Copies values from a store with the same layout (target sync).
    pub fn copy_values_from(&mut self, src: &ParamStore) -> Result<()> {
        if self.params.len() != src.params.len() {
            return Err(Error::usage("parameter layouts differ"));
        }
        for (dst, s) in self.params.iter_mut().zip(&src.params) {
            if dst.name != s.name || dst.value.raw_dim() != s.value.raw_dim() {
                return Err(Error::usage(format!(
                    "parameter {} does not match {}",
                    dst.name, s.name
                )));
            }
            dst.value.assign(&s.value);
        }
        Ok(())
    }

    /// Order-sensitive hash over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.params
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                values: p.value.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from records; every stored name must be present
    /// with a matching shape.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        let by_name: BTreeMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let r = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            if r.shape != [p.value.nrows(), p.value.ncols()]
                || r.values.len() != p.value.len()
            {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    r.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_shape_vec((r.shape[0], r.shape[1]), r.values.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}
