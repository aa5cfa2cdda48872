use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

fn next_tag() -> u64 {
    NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, trainable tensors of one model (or one optimizer group).
///
/// Every store carries a process-unique tag so gradients computed on a graph
/// are only ever accumulated into the store whose parameters were bound.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { tag: next_tag(), params: self.params.clone(), index: self.index.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: next_tag(), params: Vec::new(), index: BTreeMap::new() }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| AutodiffError::UnknownParameter(name.into()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Moves every parameter of `other` into this store under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for p in other.params {
            self.insert(format!("{prefix}{}", p.name), p.value)?;
        }
        Ok(())
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        check_matching(self, other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub(crate) fn check_matching(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.params.len() != b.params.len() {
        return Err(AutodiffError::ParameterMismatch(format!(
            "{} vs {} parameters",
            a.params.len(),
            b.params.len()
        )));
    }
    for (x, y) in a.params.iter().zip(&b.params) {
        if x.name != y.name || x.value.shape() != y.value.shape() {
            return Err(AutodiffError::ParameterMismatch(format!(
                "`{}` {:?} vs `{}` {:?}",
                x.name,
                x.value.shape(),
                y.name,
                y.value.shape()
            )));
        }
    }
    Ok(())
}
