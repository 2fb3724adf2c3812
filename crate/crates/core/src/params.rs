//! Named parameter registry shared by every layer of a model.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
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

    pub fn tensor_by_index(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name_by_index(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`. Parameters for which `trainable`
    /// returns false are recorded as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Params<'t> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(n) {
                    tape.param(t)
                } else {
                    tape.leaf(&t.clone().with_requires_grad(false))
                }
            })
            .collect();
        Params { vars }
    }

    /// Moves the gradients recorded for `params` into the tensors' buffers.
    pub fn accumulate_grads(&mut self, params: &Params<'_>) {
        for (t, v) in self.tensors.iter_mut().zip(&params.vars) {
            if let Some(g) = v.grad() {
                t.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Bit-level hash of parameter names and values, optionally restricted to
    /// names accepted by `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, n, t) in self.iter() {
            if filter(n) {
                n.hash(&mut h);
                for v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn hash(&self) -> u64 {
        self.hash_where(|_| true)
    }

    /// Replaces the values of every parameter from `other`, which must have
    /// the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::validation(name.clone(), "missing parameter"))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
pub struct Params<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Params<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn get_by_index(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl<'t> Index<ParamId> for Params<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("consistent shape")
}
