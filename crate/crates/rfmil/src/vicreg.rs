//! Variance-invariance-covariance loss over paired projection batches.
//!
//! For batches `Z, Z' ∈ R^{n×d}` the loss is
//! `total = λ·s(Z,Z') + μ·[v(Z)+v(Z')] + ν·[c(Z)+c(Z')]` with
//! - `s`: mean over all n·d entries of the squared difference,
//! - `v`: mean over dimensions of `hinge(γ − sqrt(Var_batch + ε))`, using
//!   the unbiased (n−1) column variance,
//! - `c`: sum of squared off-diagonal entries of the (n−1)-normalized
//!   covariance matrix of the centered batch, divided by d.
//!
//! Computation is in f64 end to end; the trainer casts its f32 activations
//! in and gradients out. That keeps the analytic gradient checkable against
//! central finite differences at 1e-4 relative error.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VicregWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    /// Variance target.
    pub gamma: f64,
    /// Variance stabilizer inside the square root.
    pub epsilon: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        VicregWeights {
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

impl VicregWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("nu", self.nu),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Loss terms; `variance` and `covariance` are already summed over both
/// batches, so `total = λ·invariance + μ·variance + ν·covariance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregTerms {
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn check_shapes(z: &Array2<f64>, zp: &Array2<f64>) -> Result<(usize, usize)> {
    if z.dim() != zp.dim() {
        return Err(Error::InvalidInput(format!(
            "paired batches differ in shape: {:?} vs {:?}",
            z.dim(),
            zp.dim()
        )));
    }
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::InvalidInput(
            "batch must have at least 2 rows (variance/covariance undefined)".into(),
        ));
    }
    Ok((n, d))
}

fn column_means(z: &Array2<f64>) -> Vec<f64> {
    let (n, d) = z.dim();
    let mut m = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            m[j] += z[[i, j]];
        }
    }
    for v in &mut m {
        *v /= n as f64;
    }
    m
}

/// Variance hinge for one batch: value plus the per-column regularized
/// standard deviations (needed by the gradient).
fn variance_term(z: &Array2<f64>, w: &VicregWeights) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, d) = z.dim();
    let means = column_means(z);
    let mut stds = vec![0.0; d];
    let mut total = 0.0;
    for j in 0..d {
        let mut var = 0.0;
        for i in 0..n {
            let dv = z[[i, j]] - means[j];
            var += dv * dv;
        }
        var /= (n - 1) as f64;
        let s = (var + w.epsilon).sqrt();
        stds[j] = s;
        total += (w.gamma - s).max(0.0);
    }
    (total / d as f64, stds, means)
}

/// Covariance penalty for one batch: value plus the centered matrix and its
/// covariance (needed by the gradient).
fn covariance_term(z: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let (n, d) = z.dim();
    let means = column_means(z);
    let mut x = z.clone();
    for i in 0..n {
        for j in 0..d {
            x[[i, j]] -= means[j];
        }
    }
    let cov = x.t().dot(&x) / (n - 1) as f64;
    let mut total = 0.0;
    for p in 0..d {
        for q in 0..d {
            if p != q {
                total += cov[[p, q]] * cov[[p, q]];
            }
        }
    }
    (total / d as f64, x, cov)
}

pub fn vicreg_loss(z: &Array2<f64>, zp: &Array2<f64>, w: &VicregWeights) -> Result<VicregTerms> {
    w.validate()?;
    let (n, d) = check_shapes(z, zp)?;
    let mut s = 0.0;
    for (a, b) in z.iter().zip(zp.iter()) {
        let dv = a - b;
        s += dv * dv;
    }
    s /= (n * d) as f64;
    let (vz, _, _) = variance_term(z, w);
    let (vzp, _, _) = variance_term(zp, w);
    let (cz, _, _) = covariance_term(z);
    let (czp, _, _) = covariance_term(zp);
    let variance = vz + vzp;
    let covariance = cz + czp;
    Ok(VicregTerms {
        total: w.lambda * s + w.mu * variance + w.nu * covariance,
        invariance: s,
        variance,
        covariance,
    })
}

fn add_side_grads(
    z: &Array2<f64>,
    w: &VicregWeights,
    grad: &mut Array2<f64>,
) {
    let (n, d) = z.dim();
    let (_, stds, means) = variance_term(z, w);
    // variance hinge: only columns with std below γ contribute
    for j in 0..d {
        if w.gamma - stds[j] > 0.0 {
            let coef = -w.mu / (d as f64 * (n - 1) as f64 * stds[j]);
            for i in 0..n {
                grad[[i, j]] += coef * (z[[i, j]] - means[j]);
            }
        }
    }
    // covariance: grad = ν · 4/(d(n-1)) · X · C_offdiag; the column sums of
    // the centered X vanish, so centering contributes no extra term
    let (_, x, mut cov) = covariance_term(z);
    for p in 0..d {
        cov[[p, p]] = 0.0;
    }
    let gc = x.dot(&cov) * (4.0 * w.nu / (d as f64 * (n - 1) as f64));
    *grad += &gc;
}

/// Loss terms plus `(∂total/∂Z, ∂total/∂Z')`.
pub fn vicreg_loss_grad(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    w: &VicregWeights,
) -> Result<(VicregTerms, Array2<f64>, Array2<f64>)> {
    let terms = vicreg_loss(z, zp, w)?;
    let (n, d) = z.dim();
    let coef = 2.0 * w.lambda / (n * d) as f64;
    let mut gz = (z - zp) * coef;
    let mut gzp = (zp - z) * coef;
    add_side_grads(z, w, &mut gz);
    add_side_grads(zp, w, &mut gzp);
    Ok((terms, gz, gzp))
}
