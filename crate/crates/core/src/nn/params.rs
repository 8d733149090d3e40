use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter store. Buffers (batch-norm running statistics)
/// live here too but are flagged non-trainable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Float> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, false)
    }

    fn push(&mut self, name: String, t: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        self.tensors[id.0] = t;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Records every parameter on `tape`; trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| tape.leaf(t.clone(), tr))
                .collect(),
        )
    }

    /// Records parameters from an external list (same order), e.g. the
    /// perturbed copies used by a gradient check.
    pub fn bind_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    /// Per-parameter L2 norms, for divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.norm()))
            .collect()
    }

    /// Replaces all tensors; names and shapes must already match.
    #[cfg(test)]
    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>, trainable: Vec<bool>) -> Self {
        Params {
            names,
            tensors,
            trainable,
        }
    }
}

/// Tape handles for a [`Params`] store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub fn uniform_fan_in<T: Float>(shape: &[usize], fan_in: usize, s: &mut Stream) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of((2.0 * s.uniform() - 1.0) * bound)).collect())
        .expect("init shape")
}

/// LeCun normal: `N(0, 1/fan_in)`.
pub fn lecun_normal<T: Float>(shape: &[usize], fan_in: usize, s: &mut Stream) -> Tensor<T> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(s.normal() * std)).collect()).expect("init shape")
}
