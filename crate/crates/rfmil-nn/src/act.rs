//! Elementwise activations.

use ndarray::{Array2, Array4};

pub fn relu4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *input*.
pub fn relu4_backward(x: &Array4<f32>, grad_y: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximation GELU.
pub fn gelu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(gelu_scalar)
}

pub fn gelu2_backward(x: &Array2<f32>, grad_y: &Array2<f32>) -> Array2<f32> {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |gv, &xv| *gv *= gelu_grad_scalar(xv));
    g
}

pub fn relu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(x: &Array2<f32>, grad_y: &Array2<f32>) -> Array2<f32> {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-2.0f32, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-3;
            let fd = (gelu_scalar(x + eps) - gelu_scalar(x - eps)) / (2.0 * eps);
            let an = gelu_grad_scalar(x);
            assert!((fd - an).abs() < 1e-3, "x={x}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn relu_masks_negative_inputs() {
        let x = Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Array2::from_elem((1, 3), 1.0);
        let gx = relu2_backward(&x, &g);
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 0.0, 1.0]);
    }
}
