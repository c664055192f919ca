//! Fully connected layer.

use crate::param::Param;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// `y = x Wᵀ + b` with `W: [out, in]`, `x: [n, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::randn(format!("{name}.w"), &[out_dim, in_dim], in_dim, 1.0, rng),
            b: Param::zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Accumulates weight/bias grads; returns grad wrt the input.
    /// `x` must be the forward input.
    pub fn backward(&mut self, x: &Array2<f32>, grad_y: &Array2<f32>) -> Array2<f32> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let grad_x = grad_y.dot(&w);
        let gw = grad_y.t().dot(x);
        let gb: Array1<f32> = grad_y.sum_axis(Axis(0));
        self.w.grad += &gw;
        let mut bg = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        bg += &gb;
        grad_x
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};
    use ndarray::array;

    #[test]
    fn forward_matches_hand_computation() {
        let mut rng = stream(0, &[tag("t")]);
        let mut lin = Linear::new("l", 2, 3, &mut rng);
        lin.w.value = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].into_dyn();
        lin.b.value = array![0.5, -0.5, 0.0].into_dyn();
        let x = array![[1.0, 1.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[3.5, 6.5, 11.0]]);
    }

    #[test]
    fn backward_grads_match_finite_differences() {
        let mut rng = stream(1, &[tag("t")]);
        let mut lin = Linear::new("l", 3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| 0.3 * (i as f32) - 0.2 * (j as f32) + 0.1);
        // loss = sum(y^2)/2, so grad_y = y
        let y = lin.forward(&x);
        let grad_x = lin.backward(&x, &y);

        let eps = 1e-3f32;
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let lp: f32 = lin.forward(&xp).iter().map(|v| v * v).sum::<f32>() / 2.0;
                let lm: f32 = lin.forward(&xm).iter().map(|v| v * v).sum::<f32>() / 2.0;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - grad_x[[i, j]]).abs() < 1e-2 * fd.abs().max(1.0),
                    "fd {fd} vs analytic {}",
                    grad_x[[i, j]]
                );
            }
        }
    }
}
