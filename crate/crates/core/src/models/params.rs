use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Tape, Tensor, Var};

/// Ordered, named collection of weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Tape variables for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;

    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    /// Convolution kernel k×k×Cin×Cout uniform in ±sqrt(6/(k·k·Cin)) (He
    /// uniform) plus a zero bias. Returns the kernel index; the bias follows it.
    pub fn push_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> usize {
        let bound = (6.0 / (k * k * cin) as f64).sqrt();
        let idx = self.push(format!("{name}.weight"), Tensor::uniform(&[k, k, cin, cout], bound, rng));
        self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        idx
    }

    /// Dense `fan_in × fan_out` matrix plus zero bias.
    pub fn push_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let idx = self.push(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        idx
    }

    pub fn push_layer_norm(&mut self, name: &str, dim: usize) -> usize {
        let idx = self.push(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        self.push(format!("{name}.beta"), Tensor::zeros(&[dim]));
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on the tape, as trainable parameters or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect(),
        )
    }

    /// Plain gradient-descent update `w -= lr * dL/dw`.
    pub fn sgd_step(&mut self, grads: &Gradients, bound: &Bound, lr: f64) {
        for ((_, t), &v) in self.entries.iter_mut().zip(bound.vars()) {
            if let Some(g) = grads.get(v) {
                for (w, gv) in t.data_mut().iter_mut().zip(g) {
                    *w -= lr * gv;
                }
            }
        }
    }

    /// Copy of the store with every name prefixed by `prefix`.
    pub fn renamed(&self, prefix: &str) -> Self {
        Self { entries: self.entries.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect() }
    }

    /// Replaces tensors by name from `(name, tensor)` records, checking shapes.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, t) in &mut self.entries {
            let src = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Convolution followed by bias, using the kernel at `idx` and bias at `idx + 1`.
pub(crate) fn conv(tape: &mut Tape, b: &Bound, idx: usize, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, b[idx], stride, pad)?;
    tape.add_bias(y, b[idx + 1])
}

/// `x · W + bias` for an n×d input.
pub(crate) fn linear(tape: &mut Tape, b: &Bound, idx: usize, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b[idx])?;
    tape.add_bias(y, b[idx + 1])
}
