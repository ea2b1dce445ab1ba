//! Dense tanh networks with exact input gradients and the mixed
//! second-derivative parameter gradients needed by input-gradient losses.

mod checkpoint;
mod mlp;
mod policy;

pub use checkpoint::{Checkpoint, NetRecord, PolicyRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{Head, Layer, MlpNet};
pub use policy::{LinearPolicy, Policy};

pub(crate) use mlp::dot;

use crate::error::Result;

/// Flat vector of trainable parameters with a fixed layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A differentiable scalar function of the state: a certificate candidate.
///
/// Implemented by [`MlpNet`] and by [`FnField`], which wraps closed-form
/// functions for fixtures.
pub trait ScalarField: Sync {
    fn input_dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Global Lipschitz bound of the value, when one is known in closed form.
    fn certified_lipschitz(&self) -> Option<f64> {
        None
    }

    /// Global Lipschitz bound of the input gradient, when known.
    fn certified_gradient_lipschitz(&self) -> Option<f64> {
        None
    }
}

impl ScalarField for MlpNet {
    fn input_dim(&self) -> usize {
        MlpNet::input_dim(self)
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.eval(x)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        MlpNet::value_and_grad(self, x)
    }

    fn certified_lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz_bound())
    }

    fn certified_gradient_lipschitz(&self) -> Option<f64> {
        Some(self.gradient_lipschitz_bound())
    }
}

/// Closed-form scalar field given by a value and a gradient function.
pub struct FnField<V, G> {
    pub dim: usize,
    pub value: V,
    pub grad: G,
}

impl<V, G> FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, value: V, grad: G) -> Self {
        FnField { dim, value, grad }
    }
}

impl<V, G> ScalarField for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(crate::Error::shape(self.dim, x.len()));
        }
        Ok((self.value)(x))
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim {
            return Err(crate::Error::shape(self.dim, x.len()));
        }
        Ok(((self.value)(x), (self.grad)(x)))
    }
}
