//! Logistic linear probe on frozen features, used for online evaluation of
//! the self-supervised representation.

use crate::error::{Error, Result};
use crate::eval::compute_metrics;
use ndarray::Array2;

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.1;
const PROBE_L2: f64 = 1e-4;

/// Full-batch logistic regression in f64 with Adam-style moments. The
/// feature standardization comes from the training split only.
struct Probe {
    w: Vec<f64>,
    b: f64,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Probe {
    fn fit(features: &Array2<f32>, labels: &[bool]) -> Probe {
        let (n, d) = features.dim();
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += f64::from(features[[i, j]]);
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                let dv = f64::from(features[[i, j]]) - mean[j];
                var[j] += dv * dv;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    1.0 / s
                } else {
                    1.0
                }
            })
            .collect();

        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| (f64::from(features[[i, j]]) - mean[j]) * inv_std[j])
                    .collect()
            })
            .collect();
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

        let mut w = vec![0.0f64; d];
        let mut b = 0.0f64;
        let (mut mw, mut vw) = (vec![0.0f64; d], vec![0.0f64; d]);
        let (mut mb, mut vb) = (0.0f64, 0.0f64);
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        for t in 1..=PROBE_STEPS {
            let mut gw = vec![0.0f64; d];
            let mut gb = 0.0f64;
            for i in 0..n {
                let z: f64 = x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = (p - y[i]) / n as f64;
                for j in 0..d {
                    gw[j] += err * x[i][j];
                }
                gb += err;
            }
            for j in 0..d {
                gw[j] += PROBE_L2 * w[j];
            }
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            for j in 0..d {
                mw[j] = b1 * mw[j] + (1.0 - b1) * gw[j];
                vw[j] = b2 * vw[j] + (1.0 - b2) * gw[j] * gw[j];
                w[j] -= PROBE_LR * (mw[j] / bc1) / ((vw[j] / bc2).sqrt() + eps);
            }
            mb = b1 * mb + (1.0 - b1) * gb;
            vb = b2 * vb + (1.0 - b2) * gb * gb;
            b -= PROBE_LR * (mb / bc1) / ((vb / bc2).sqrt() + eps);
        }
        Probe { w, b, mean, inv_std }
    }

    fn scores(&self, features: &Array2<f32>) -> Vec<f64> {
        let (n, d) = features.dim();
        (0..n)
            .map(|i| {
                let z: f64 = (0..d)
                    .map(|j| {
                        (f64::from(features[[i, j]]) - self.mean[j]) * self.inv_std[j] * self.w[j]
                    })
                    .sum::<f64>()
                    + self.b;
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Fit a linear probe on frozen training features and return its validation
/// AUROC. Labels are the weak ROI labels inherited from core labels.
pub fn online_linear_eval(
    train_features: &Array2<f32>,
    train_labels: &[bool],
    val_features: &Array2<f32>,
    val_labels: &[bool],
) -> Result<f64> {
    if train_features.nrows() != train_labels.len()
        || val_features.nrows() != val_labels.len()
    {
        return Err(Error::InvalidInput("features/labels length mismatch".into()));
    }
    if !both_classes(train_labels) || !both_classes(val_labels) {
        return Err(Error::UndefinedMetric(
            "linear probe needs both classes in train and validation".into(),
        ));
    }
    let probe = Probe::fit(train_features, train_labels);
    let scores = probe.scores(val_features);
    Ok(compute_metrics(&scores, val_labels, 0.5)?.auroc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rfmil_nn::rng::{stream, tag};

    #[test]
    fn separable_features_score_perfectly() {
        // label embedded in one coordinate
        let n = 200;
        let feats = Array2::from_shape_fn((n, 8), |(i, j)| {
            if j == 3 {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.37
            }
        });
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let auroc =
            online_linear_eval(&feats, &labels, &feats, &labels).unwrap();
        assert_eq!(auroc, 1.0);
    }

    #[test]
    fn random_features_score_near_half() {
        let mut rng = stream(40, &[tag("probe")]);
        let n = 2000;
        let train = Array2::from_shape_fn((n, 16), |_| rng.gen_range(-1.0f32..1.0));
        let val = Array2::from_shape_fn((n, 16), |_| rng.gen_range(-1.0f32..1.0));
        let train_labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let val_labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let auroc = online_linear_eval(&train, &train_labels, &val, &val_labels).unwrap();
        assert!(
            (0.4..=0.6).contains(&auroc),
            "random-feature AUROC {auroc} outside [0.4, 0.6]"
        );
    }

    #[test]
    fn identical_features_for_both_classes_give_half() {
        let feats = Array2::from_elem((50, 4), 0.8f32);
        let labels: Vec<bool> = (0..50).map(|i| i % 2 == 0).collect();
        let auroc = online_linear_eval(&feats, &labels, &feats, &labels).unwrap();
        assert_eq!(auroc, 0.5);
    }

    #[test]
    fn single_class_errors() {
        let feats = Array2::zeros((10, 4));
        let labels = vec![true; 10];
        assert!(online_linear_eval(&feats, &labels, &feats, &labels).is_err());
    }
}
