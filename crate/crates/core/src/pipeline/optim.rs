//! SGD with classical momentum and L2 weight decay.

use std::collections::BTreeMap;

use crate::error::{contract, shape_err, Result};
use crate::numerics::Tensor;

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`, on one tensor.
pub fn sgd_step(
    p: &mut Tensor,
    g: &Tensor,
    v: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != v.shape() {
        return Err(shape_err("sgd_step", p.shape(), g.shape()));
    }
    for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *pi;
        *pi -= lr * *vi;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name, created on first use.
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every entry of `params` that has a gradient. A gradient for
    /// an unknown name is a contract error.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| contract(format!("gradient for unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            sgd_step(p, g, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}
