use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam moment buffers. `step` counts the updates this parameter received.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam: AdamState<T>,
    /// Set when a backward pass reached this parameter since the last optimizer step.
    pub(crate) touched: bool,
}

impl<T: Float> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let n = value.numel();
        let shape = value.shape().to_vec();
        Parameter {
            name,
            grad: Tensor::zeros(shape),
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
            value,
            touched: false,
        }
    }

    pub fn touched(&self) -> bool {
        self.touched
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.grad.numel());
        for (d, &s) in self.grad.data_mut().iter_mut().zip(g) {
            *d += s;
        }
        self.touched = true;
    }
}

/// Owns every learnable tensor of a model, addressed by `ParamId` or by
/// dotted path name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Weight count of parameters whose name starts with `prefix`.
    pub fn num_weights_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Parameters ordered by name.
    pub fn sorted(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.by_name.values().map(move |id| &self.params[id.0])
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            p.touched = false;
        }
    }

    /// Same parameters converted to another element type. Optimizer state
    /// is reset.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Copy of the parameters whose name satisfies `keep`, in sorted order.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in self.sorted().filter(|p| keep(&p.name)) {
            out.add(p.name.clone(), p.value.clone()).expect("names are unique");
        }
        out
    }

    /// Copies every parameter of `other` whose name exists here (shapes must match).
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for p in other.iter() {
            if let Some(&id) = self.by_name.get(&p.name) {
                self.set_value(id, p.value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

/// Registers named parameters with seeded initialization.
pub struct ParamBuilder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::narrow(self.rng.random_range(-bound..bound))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::narrow(c); n],
        };
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// `C_out × C_in × k × k` weight plus optional `C_out` bias.
    pub fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
    ) -> Result<(ParamId, Option<ParamId>)> {
        let w = self.param(
            format!("{name}.weight"),
            &[c_out, c_in, k, k],
            Init::KaimingUniform { fan_in: c_in * k * k },
        )?;
        let b = if bias {
            Some(self.param(format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok((w, b))
    }

    /// `rows × cols` matrix with fan-in `cols`.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.param(name.to_string(), &[rows, cols], Init::KaimingUniform { fan_in: cols })
    }
}
