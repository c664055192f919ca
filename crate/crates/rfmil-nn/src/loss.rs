//! Classification losses.

use ndarray::Array2;

/// Mean cross-entropy over the batch from raw logits.
/// Returns `(loss, grad_logits)` with the 1/N factor folded into the grad.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let (n, c) = logits.dim();
    assert_eq!(labels.len(), n);
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        loss += f64::from(log_z - logits[[i, labels[i]]]);
        for j in 0..c {
            let p = (logits[[i, j]] - log_z).exp();
            grad[[i, j]] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

/// Softmax probabilities per row.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    crate::attention::row_softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array2::zeros((4, 2));
        let (loss, _) = cross_entropy(&logits, &[0, 1, 0, 1]);
        assert!((loss - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn grad_is_softmax_minus_onehot_over_n() {
        let logits = array![[2.0, 0.0]];
        let (_, g) = cross_entropy(&logits, &[0]);
        let p0 = (2.0f32).exp() / ((2.0f32).exp() + 1.0);
        assert!((g[[0, 0]] - (p0 - 1.0)).abs() < 1e-6);
        assert!((g[[0, 1]] - (1.0 - p0)).abs() < 1e-6);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let logits = array![[0.5, -0.3], [1.2, 0.8], [-0.6, 0.1]];
        let labels = [1usize, 0, 0];
        let (_, g) = cross_entropy(&logits, &labels);
        let eps = 1e-3f32;
        for idx in [[0usize, 0usize], [1, 1], [2, 0]] {
            let mut lp = logits.clone();
            lp[idx] += eps;
            let mut lm = logits.clone();
            lm[idx] -= eps;
            let fd = (cross_entropy(&lp, &labels).0 - cross_entropy(&lm, &labels).0) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 1e-3, "idx {idx:?} fd {fd} vs {}", g[idx]);
        }
    }
}
