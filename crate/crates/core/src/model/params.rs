use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Ordered, named parameter tensors.
///
/// A trainable store wraps every tensor as a candle variable so that gradients are
/// tracked; a frozen store holds plain tensors that never enter an autograd graph.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    trainable: bool,
}

impl ParamStore {
    pub fn new(trainable: bool) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            trainable,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn wrap(&self, t: &Tensor) -> Result<Tensor> {
        if self.trainable {
            Ok(Var::from_tensor(&t.detach())?.into_inner())
        } else {
            Ok(t.detach())
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let t = self.wrap(&tensor)?;
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Replaces the value at `i`, keeping the store's trainability.
    pub fn set(&mut self, i: usize, value: &Tensor) -> Result<()> {
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::shape(format!(
                "parameter `{}`: {:?} vs {:?}",
                self.names[i],
                value.shape(),
                self.tensors[i].shape()
            )));
        }
        self.tensors[i] = self.wrap(value)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.elem_count()).sum()
    }

    /// Deep copy with the requested trainability.
    pub fn copy_as(&self, trainable: bool) -> Result<Self> {
        let mut out = ParamStore::new(trainable);
        for (n, t) in self.iter() {
            out.insert(n, t.copy()?)?;
        }
        Ok(out)
    }

    /// Subset of entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str, trainable: bool) -> Result<Self> {
        let mut out = ParamStore::new(trainable);
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.copy()?)?;
        }
        Ok(out)
    }

    pub fn shapes_match(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// All values flattened in store order, widened to f64.
    pub fn flatten_f64(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in &self.tensors {
            out.extend(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(|t| t.dtype())
    }

    /// Casts every tensor to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(self.trainable);
        for (n, t) in self.iter() {
            out.insert(n, t.to_dtype(dtype)?)?;
        }
        Ok(out)
    }
}

/// Truncated normal (±2σ) initializer drawn from a host generator.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn constant(shape: &[usize], value: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::full(value, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
