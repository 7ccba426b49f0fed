//! Named learnable arrays with gradient slots, and the glue that binds them
//! onto a [`Tape`] for one forward pass.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a freshly created parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `sqrt(2 / (fan_in + fan_out))` over a rank-2 shape.
    Xavier,
}

/// Declaration of one parameter; models list these to allocate or count.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
    pub step: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    /// Allocates every spec in order, drawing random inits from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Constant(c) => vec![T::lit(c); n],
                Init::Normal(std) => (0..n).map(|_| rng::normal::<T, _>(rng) * T::lit(std)).collect(),
                Init::Xavier => {
                    let (fan_in, fan_out) = match spec.shape.as_slice() {
                        [a, b] => (*a, *b),
                        _ => (n, n),
                    };
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng::normal::<T, _>(rng) * T::lit(std)).collect()
                }
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        ensure!(!self.params.contains_key(name), InvalidArgument, "duplicate parameter {}", name);
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((a, pa), (b, pb))| a == b && pa.value.shape() == pb.value.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

/// Lazily places store parameters on a tape, once per name.
pub struct Binder<'s, T: Scalar> {
    store: &'s ParameterStore<T>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'s, T: Scalar> Binder<'s, T> {
    /// Parameters become gradient-tracked leaves.
    pub fn trainable(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters become constants; no gradient ever reaches them.
    pub fn frozen(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.value(name)?.clone();
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Releases the store borrow, keeping the name-to-node map.
    pub fn finish(self) -> BoundParams {
        BoundParams { vars: self.vars }
    }
}

/// Parameters placed on a tape by a [`Binder`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Adds `scale * dL/dparam` into the store's gradient slots.
    pub fn accumulate<T: Scalar>(&self, grads: &Gradients<T>, store: &mut ParameterStore<T>, scale: T) -> Result<()> {
        for (name, &v) in &self.vars {
            if let Some(g) = grads.get(v) {
                let slot = store.get_mut(name)?;
                for (d, &s) in slot.grad.data_mut().iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
        }
        Ok(())
    }
}
