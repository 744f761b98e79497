//! Named parameter storage and the linear map used throughout the model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Ordered map of trainable arrays keyed by dotted names (`encoder.w_hh`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    /// Registers `name` with entries drawn from uniform(−1/√fan_in, 1/√fan_in).
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = rng_for(seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
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

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for inference-only tapes.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Sets every entry whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Parameter handles of one tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not registered")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Pulls the gradient of every bound parameter out of `grads`.
    /// Parameters unreachable from the loss get a zero buffer.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

/// `y = x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, bias: bool, seed: u64) {
        store.init_uniform(&format!("{prefix}.weight"), &[inputs, outputs], inputs, seed);
        if bias {
            store.init_uniform(&format!("{prefix}.bias"), &[outputs], inputs, seed);
        }
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: bound.get(&format!("{prefix}.weight"))?,
            bias: bound.try_get(&format!("{prefix}.bias")),
        })
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let inputs = *shape.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let outputs = tape.shape(self.weight)[1];
        let rows = tape.value(x).len().checked_div(inputs).unwrap_or(0);
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, inputs])? };
        let y = tape.linear(flat, self.weight, self.bias)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = outputs;
        tape.reshape(y, &out_shape)
    }
}
