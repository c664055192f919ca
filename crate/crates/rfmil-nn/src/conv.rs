//! 2D convolution via im2col + GEMM, and global average pooling.

use crate::param::Param;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

/// Square-kernel 2D convolution. Weights `[out_c, in_c, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

/// Forward cache: the batched im2col matrix plus the shapes needed to
/// scatter gradients back. Can be large; trainers control micro-batch size.
pub struct ConvCache {
    cols: Array2<f32>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Param::randn(
                format!("{name}.w"),
                &[out_c, in_c, k, k],
                fan_in,
                // He init for ReLU stacks
                std::f32::consts::SQRT_2,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), &[out_c]),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let oh = (h + 2 * self.pad - k) / self.stride + 1;
        let ow = (w + 2 * self.pad - k) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, c, h, w) = x.dim();
        let in_c = self.w.value.shape()[1];
        assert_eq!(c, in_c, "conv input channels {c} != weight channels {in_c}");
        let k = self.kernel();
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, k, self.stride, self.pad, oh, ow);

        let out_c = self.out_channels();
        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((out_c, c * k * k))
            .unwrap();
        let mut y_mat = w_mat.dot(&cols); // [out_c, n*oh*ow]
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, bi) in y_mat.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += *bi;
        }

        let mut y = Array4::zeros((n, out_c, oh, ow));
        {
            let ys = y.as_slice_mut().unwrap();
            let ym = y_mat.as_slice().unwrap();
            let plane = oh * ow;
            for oc in 0..out_c {
                for ni in 0..n {
                    let src = &ym[oc * n * plane + ni * plane..][..plane];
                    let dst = &mut ys[(ni * out_c + oc) * plane..][..plane];
                    dst.copy_from_slice(src);
                }
            }
        }
        (
            y,
            ConvCache {
                cols,
                in_shape: [n, c, h, w],
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, grad_y: &Array4<f32>) -> Array4<f32> {
        let [n, c, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let out_c = self.out_channels();
        let k = self.kernel();
        assert_eq!(grad_y.dim(), (n, out_c, oh, ow));

        // [out_c, n*oh*ow] view of grad_y
        let mut g_mat = Array2::zeros((out_c, n * oh * ow));
        {
            let gs = grad_y.as_slice().unwrap();
            let gm = g_mat.as_slice_mut().unwrap();
            let plane = oh * ow;
            for ni in 0..n {
                for oc in 0..out_c {
                    let src = &gs[(ni * out_c + oc) * plane..][..plane];
                    let dst = &mut gm[oc * n * plane + ni * plane..][..plane];
                    dst.copy_from_slice(src);
                }
            }
        }

        let gw = g_mat.dot(&cache.cols.t()); // [out_c, c*k*k]
        self.w.grad += &gw
            .into_shape_with_order((out_c, c, k, k))
            .unwrap()
            .into_dyn();
        let gb: Array1<f32> = g_mat.sum_axis(Axis(1));
        let mut bg = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        bg += &gb;

        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((out_c, c * k * k))
            .unwrap();
        let grad_cols = w_mat.t().dot(&g_mat); // [c*k*k, n*oh*ow]
        col2im(&grad_cols, [n, c, h, w], k, self.stride, self.pad, oh, ow)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

/// Unfold `x` into `[c*k*k, n*oh*ow]`, zero-padded.
fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, n * oh * ow));
    let xs = x.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * row_len;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let ih = (ohi * stride + ki) as isize - pad as isize;
                        let dst_off = base + ni * oh * ow + ohi * ow;
                        if ih < 0 || ih >= h as isize {
                            continue; // stays zero
                        }
                        let src_row = ((ni * c + ci) * h + ih as usize) * w;
                        if stride == 1 {
                            // contiguous run where iw is in range
                            let iw0 = kj as isize - pad as isize;
                            let lo = (-iw0).max(0) as usize;
                            let hi = ((w as isize - iw0).min(ow as isize)).max(0) as usize;
                            if lo < hi {
                                let src = &xs[src_row + (iw0 + lo as isize) as usize
                                    ..src_row + (iw0 + hi as isize) as usize];
                                cs[dst_off + lo..dst_off + hi].copy_from_slice(src);
                            }
                        } else {
                            for owi in 0..ow {
                                let iw = (owi * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    cs[dst_off + owi] = xs[src_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column gradient back into input layout.
fn col2im(
    grad_cols: &Array2<f32>,
    in_shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f32> {
    let [n, c, h, w] = in_shape;
    let mut gx = Array4::zeros((n, c, h, w));
    let gs = gx.as_slice_mut().unwrap();
    let cs = grad_cols.as_slice().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * row_len;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let ih = (ohi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = ((ni * c + ci) * h + ih as usize) * w;
                        let src_off = base + ni * oh * ow + ohi * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                gs[dst_row + iw as usize] += cs[src_off + owi];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        let (n, c, h, w) = x.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0f32;
                for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    s += v;
                }
                y[[ni, ci]] = s * scale;
            }
        }
        y
    }

    pub fn backward(&self, in_shape: (usize, usize, usize, usize), grad_y: &Array2<f32>) -> Array4<f32> {
        let (n, c, h, w) = in_shape;
        let scale = 1.0 / (h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = grad_y[[ni, ci]] * scale;
                gx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(x: &Array4<f32>, w: &ndarray::ArrayD<f32>, b: &ndarray::ArrayD<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (n, c, h, wd) = x.dim();
        let out_c = w.shape()[0];
        let k = w.shape()[2];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = Array4::zeros((n, out_c, oh, ow));
        for ni in 0..n {
            for oc in 0..out_c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = b[[oc]];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        s += x[[ni, ci, ih as usize, iw as usize]]
                                            * w[[oc, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[ni, oc, i, j]] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = stream(3, &[tag("conv")]);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let conv = Conv2d::new("c", 3, 4, 3, stride, pad, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 7, 6), |(a, b, c, d)| {
                ((a * 131 + b * 31 + c * 7 + d) % 13) as f32 * 0.25 - 1.0
            });
            let (y, _) = conv.forward(&x);
            let y_ref = conv_naive(&x, &conv.w.value, &conv.b.value, stride, pad);
            let max_err = y
                .iter()
                .zip(y_ref.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "stride={stride} pad={pad} err={max_err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(4, &[tag("conv")]);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 6, 5), |(_, b, c, d)| {
            0.1 * (b as f32) - 0.07 * (c as f32) + 0.05 * (d as f32)
        });
        let (y, cache) = conv.forward(&x);
        let grad_x = conv.backward(&cache, &y); // loss = sum(y^2)/2
        let loss = |xx: &Array4<f32>| -> f32 {
            conv.forward(xx).0.iter().map(|v| v * v).sum::<f32>() / 2.0
        };
        let eps = 1e-2f32;
        for idx in [[0, 0, 0, 0], [0, 1, 3, 2], [0, 0, 5, 4], [0, 1, 2, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let an = grad_x[idx];
            assert!(
                (fd - an).abs() < 2e-2 * fd.abs().max(1.0),
                "idx {idx:?}: fd {fd} vs analytic {an}"
            );
        }
        // weight grad spot check by finite differences
        let (_, cache) = conv.forward(&x);
        conv.w.zero_grad();
        conv.b.zero_grad();
        let (y, _) = conv.forward(&x);
        conv.backward(&cache, &y);
        let widx = [1, 0, 1, 2];
        let orig = conv.w.value[widx.as_slice()];
        conv.w.value[widx.as_slice()] = orig + eps;
        let lp = conv.forward(&x).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
        conv.w.value[widx.as_slice()] = orig - eps;
        let lm = conv.forward(&x).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
        conv.w.value[widx.as_slice()] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let an = conv.w.grad[widx.as_slice()];
        assert!((fd - an).abs() < 2e-2 * fd.abs().max(1.0), "w fd {fd} vs {an}");
    }

    #[test]
    fn gap_averages_and_scatters() {
        let gap = GlobalAvgPool;
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, h, w)| (c * 4 + h * 2 + w) as f32);
        let y = gap.forward(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 5.5);
        let g = gap.backward((1, 2, 2, 2), &Array2::from_elem((1, 2), 4.0));
        assert!(g.iter().all(|&v| v == 1.0));
    }
}
