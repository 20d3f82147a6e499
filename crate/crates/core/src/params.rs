//! Binding parameter structs onto a [`Tape`].

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bundle of weight tensors with a fixed traversal order.
///
/// `tensors` and `bind_from` must walk the same order so that a flat list
/// of tape variables (for instance perturbed copies inside a gradient
/// check) can stand in for the stored values.
pub trait Params {
    type Bound;

    fn tensors(&self) -> Vec<&Tensor>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<Self::Bound>;

    fn bind(&self, tape: &mut Tape) -> Result<Self::Bound> {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        self.bind_from(&mut vars.into_iter())
    }

    fn cloned_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }
}

pub(crate) fn next_var(vars: &mut dyn Iterator<Item = Var>) -> Result<Var> {
    vars.next()
        .ok_or_else(|| Error::invalid("parameter binding ran out of variables"))
}

impl<P: Params> Params for Vec<P> {
    type Bound = Vec<P::Bound>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().flat_map(P::tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(P::tensors_mut).collect()
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<Self::Bound> {
        self.iter().map(|p| p.bind_from(vars)).collect()
    }
}

impl<P: Params> Params for Option<P> {
    type Bound = Option<P::Bound>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.as_ref().map(P::tensors).unwrap_or_default()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.as_mut().map(P::tensors_mut).unwrap_or_default()
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<Self::Bound> {
        self.as_ref().map(|p| p.bind_from(vars)).transpose()
    }
}

/// Per-channel batchnorm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Params for NormParams {
    type Bound = NormVars;

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<NormVars> {
        Ok(NormVars {
            gamma: next_var(vars)?,
            beta: next_var(vars)?,
        })
    }
}
