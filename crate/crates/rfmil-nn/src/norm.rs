//! Normalization layers: GroupNorm for the CNN, LayerNorm for the transformer.
//!
//! Both normalize per sample (no running statistics), which keeps training
//! deterministic and evaluation independent of batch composition.

use crate::param::Param;
use ndarray::{Array2, Array4, Axis};

/// GroupNorm over `[C/G, H, W]` slices of each sample.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f32,
}

pub struct GroupNormCache {
    xhat: Array4<f32>,
    inv_std: Array2<f32>, // [N, G]
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[channels]);
        gamma.value.fill(1.0);
        GroupNorm {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, GroupNormCache) {
        let (n, c, h, w) = x.dim();
        let g = self.groups;
        let cpg = c / g;
        let m = (cpg * h * w) as f32;
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, g));
        for ni in 0..n {
            for gi in 0..g {
                let mut mean = 0.0f32;
                for ci in gi * cpg..(gi + 1) * cpg {
                    for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                        mean += v;
                    }
                }
                mean /= m;
                let mut var = 0.0f32;
                for ci in gi * cpg..(gi + 1) * cpg {
                    for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, gi]] = is;
                for ci in gi * cpg..(gi + 1) * cpg {
                    let xs = x.index_axis(Axis(0), ni);
                    let xs = xs.index_axis(Axis(0), ci);
                    let mut hs = xhat.index_axis_mut(Axis(0), ni);
                    let mut hs = hs.index_axis_mut(Axis(0), ci);
                    for (o, v) in hs.iter_mut().zip(xs.iter()) {
                        *o = (v - mean) * is;
                    }
                }
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let ga = self.gamma.value[[ci]];
            let be = self.beta.value[[ci]];
            for ni in 0..n {
                let mut ys = y.index_axis_mut(Axis(0), ni);
                let mut ys = ys.index_axis_mut(Axis(0), ci);
                for v in ys.iter_mut() {
                    *v = *v * ga + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, grad_y: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = grad_y.dim();
        let g = self.groups;
        let cpg = c / g;
        let m = (cpg * h * w) as f32;

        for ci in 0..c {
            let mut gg = 0.0f32;
            let mut gb = 0.0f32;
            for ni in 0..n {
                let dy = grad_y.index_axis(Axis(0), ni);
                let dy = dy.index_axis(Axis(0), ci);
                let xh = cache.xhat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                for (d, x) in dy.iter().zip(xh.iter()) {
                    gg += d * x;
                    gb += d;
                }
            }
            self.gamma.grad[[ci]] += gg;
            self.beta.grad[[ci]] += gb;
        }

        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for gi in 0..g {
                // dxhat = dy * gamma; reduce means over the group
                let mut sum_dxhat = 0.0f32;
                let mut sum_dxhat_xhat = 0.0f32;
                for ci in gi * cpg..(gi + 1) * cpg {
                    let ga = self.gamma.value[[ci]];
                    let dy = grad_y.index_axis(Axis(0), ni);
                    let dy = dy.index_axis(Axis(0), ci);
                    let xh = cache.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci);
                    for (d, x) in dy.iter().zip(xh.iter()) {
                        let dxh = d * ga;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * x;
                    }
                }
                let mean_dxhat = sum_dxhat / m;
                let mean_dxhat_xhat = sum_dxhat_xhat / m;
                let is = cache.inv_std[[ni, gi]];
                for ci in gi * cpg..(gi + 1) * cpg {
                    let ga = self.gamma.value[[ci]];
                    let dy = grad_y.index_axis(Axis(0), ni);
                    let dy = dy.index_axis(Axis(0), ci);
                    let xh = cache.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci);
                    let mut gxs = gx.index_axis_mut(Axis(0), ni);
                    let mut gxs = gxs.index_axis_mut(Axis(0), ci);
                    for ((o, d), x) in gxs.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                        let dxh = d * ga;
                        *o = is * (dxh - mean_dxhat - x * mean_dxhat_xhat);
                    }
                }
            }
        }
        gx
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

/// LayerNorm over the last axis of `[n, d]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

pub struct LayerNormCache {
    xhat: Array2<f32>,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[dim]);
        gamma.value.fill(1.0);
        LayerNorm {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = vec![0.0f32; n];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mean) * is;
            }
        }
        let mut y = xhat.clone();
        for i in 0..n {
            for j in 0..d {
                y[[i, j]] = y[[i, j]] * self.gamma.value[[j]] + self.beta.value[[j]];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, grad_y: &Array2<f32>) -> Array2<f32> {
        let (n, d) = grad_y.dim();
        for j in 0..d {
            let mut gg = 0.0f32;
            let mut gb = 0.0f32;
            for i in 0..n {
                gg += grad_y[[i, j]] * cache.xhat[[i, j]];
                gb += grad_y[[i, j]];
            }
            self.gamma.grad[[j]] += gg;
            self.beta.grad[[j]] += gb;
        }
        let mut gx = Array2::zeros((n, d));
        let df = d as f32;
        for i in 0..n {
            let mut mean_dxhat = 0.0f32;
            let mut mean_dxhat_xhat = 0.0f32;
            for j in 0..d {
                let dxh = grad_y[[i, j]] * self.gamma.value[[j]];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[[i, j]];
            }
            mean_dxhat /= df;
            mean_dxhat_xhat /= df;
            let is = cache.inv_std[i];
            for j in 0..d {
                let dxh = grad_y[[i, j]] * self.gamma.value[[j]];
                gx[[i, j]] = is * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
            }
        }
        gx
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}
