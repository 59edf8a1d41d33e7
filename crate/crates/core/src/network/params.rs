use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("ParamStore::insert", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Adds a conv layer `name.weight` `[c_out, c_in, kh, kw]` and `name.bias`.
    /// Weights are fan-in scaled normals, biases zero.
    pub fn add_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: (usize, usize), rng: &mut impl Rng) -> Result<()> {
        self.add_conv_scaled(name, c_in, c_out, k, 1.0, rng)
    }

    /// As [`ParamStore::add_conv`] with the weight std multiplied by `gain`.
    pub fn add_conv_scaled(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fan_in = (c_in * k.0 * k.1) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        self.insert(format!("{name}.weight"), Tensor::randn(Shape::new(c_out, c_in, k.0, k.1), std, rng))?;
        self.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(c_out, 1, 1, 1)))
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect() }
    }
}

/// Parameter name to tape handle.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("BoundParams", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another tape value of the same shape.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::invalid("BoundParams", format!("missing parameter `{name}`"))),
        }
    }
}

/// `conv(x)` using `prefix.weight` / `prefix.bias` with "same" padding for odd kernels.
pub fn conv_layer<T: Element>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let [_, _, kh, kw] = tape.shape(w).0;
    tape.conv2d(x, w, Some(b), (stride, stride), (kh / 2, kw / 2))
}
