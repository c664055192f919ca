//! Trainable parameters: value plus accumulated gradient.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// A named trainable tensor. `grad` always has the same shape as `value`
/// and accumulates across backward calls until `zero_grad`.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    /// He-style normal init with std = gain / sqrt(fan_in).
    pub fn randn(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        });
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Zero the gradients of a parameter collection.
pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
