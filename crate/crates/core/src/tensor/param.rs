use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// Owns every learnable parameter and non-learnable buffer of a network.
///
/// Parameters and buffers share one namespace; names are unique. Buffers
/// (batch-norm running statistics) are addressed with the same id type but
/// never receive gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
    by_name: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

const BUFFER_BIT: usize = 1 << (usize::BITS - 1);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.check_unique(&name)?;
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), Slot::Param(id));
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.check_unique(&name)?;
        let id = self.buffers.len();
        self.by_name.insert(name.clone(), Slot::Buffer(id));
        self.buffers.push((name, value));
        Ok(ParamId(id | BUFFER_BIT))
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|slot| match *slot {
            Slot::Param(i) => ParamId(i),
            Slot::Buffer(i) => ParamId(i | BUFFER_BIT),
        })
    }

    pub fn is_buffer(id: ParamId) -> bool {
        id.0 & BUFFER_BIT != 0
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        if Self::is_buffer(id) {
            &self.buffers[id.0 & !BUFFER_BIT].1
        } else {
            &self.params[id.0].value
        }
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        if Self::is_buffer(id) {
            &mut self.buffers[id.0 & !BUFFER_BIT].1
        } else {
            &mut self.params[id.0].value
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        if Self::is_buffer(id) {
            &self.buffers[id.0 & !BUFFER_BIT].0
        } else {
            &self.params[id.0].name
        }
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Every named tensor, parameters first, in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = u.momentum;
            let rm = self.value_mut(u.running_mean).data_mut();
            for (r, v) in rm.iter_mut().zip(&u.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            let rv = self.value_mut(u.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&u.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}
