//! Multi-head self-attention with per-head attention matrices exposed.
//!
//! The forward pass caches every head's post-softmax attention matrix and the
//! backward pass can hand back the gradient of the loss with respect to those
//! matrices, which downstream relevancy propagation consumes.

use crate::param::Param;
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

/// Numerically stable softmax over each row.
pub fn row_softmax(scores: &Array2<f32>) -> Array2<f32> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through a row softmax: given `a = softmax(s)` and `dL/da`,
/// returns `dL/ds = a ⊙ (dL/da − rowsum(dL/da ⊙ a))`.
pub fn row_softmax_backward(a: &Array2<f32>, grad_a: &Array2<f32>) -> Array2<f32> {
    let (n, m) = a.dim();
    let mut g = Array2::zeros((n, m));
    for i in 0..n {
        let mut dot = 0.0f32;
        for j in 0..m {
            dot += grad_a[[i, j]] * a[[i, j]];
        }
        for j in 0..m {
            g[[i, j]] = a[[i, j]] * (grad_a[[i, j]] - dot);
        }
    }
    g
}

/// One self-attention head evaluated exactly as written: rows of `y` are
/// tokens, each weight maps a token vector, `A = softmax(QKᵀ/√d_k)` with
/// `d_k` the key dimension, output `A·V`. Returns `(output, A)`.
pub fn single_head_attention(
    y: &Array2<f32>,
    wq: &Array2<f32>,
    wk: &Array2<f32>,
    wv: &Array2<f32>,
) -> (Array2<f32>, Array2<f32>) {
    let q = y.dot(&wq.t());
    let k = y.dot(&wk.t());
    let v = y.dot(&wv.t());
    let dk = wq.shape()[0] as f32;
    let scores = q.dot(&k.t()) / dk.sqrt();
    let a = row_softmax(&scores);
    (a.dot(&v), a)
}

/// Packed multi-head attention over `[n, d]` with `d = heads * head_dim`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bq: Param,
    pub bk: Param,
    pub bv: Param,
    pub bo: Param,
    pub heads: usize,
}

pub struct MhaCache {
    x: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    /// Post-softmax attention, `[heads, n, n]`.
    pub attn: Array3<f32>,
    ctx: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let mut p = |suffix: &str| Param::randn(format!("{name}.{suffix}"), &[dim, dim], dim, 1.0, rng);
        let (wq, wk, wv, wo) = (p("wq"), p("wk"), p("wv"), p("wo"));
        MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            bq: Param::zeros(format!("{name}.bq"), &[dim]),
            bk: Param::zeros(format!("{name}.bk"), &[dim]),
            bv: Param::zeros(format!("{name}.bv"), &[dim]),
            bo: Param::zeros(format!("{name}.bo"), &[dim]),
            heads,
        }
    }

    fn proj(&self, x: &Array2<f32>, w: &Param, b: &Param) -> Array2<f32> {
        let w = w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, MhaCache) {
        let (n, d) = x.dim();
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();

        let q = self.proj(x, &self.wq, &self.bq);
        let k = self.proj(x, &self.wk, &self.bk);
        let v = self.proj(x, &self.wv, &self.bv);

        let mut attn = Array3::zeros((h, n, n));
        let mut ctx = Array2::zeros((n, d));
        for hi in 0..h {
            let cols = s![.., hi * dh..(hi + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let a = row_softmax(&scores);
            ctx.slice_mut(cols).assign(&a.dot(&vh));
            attn.index_axis_mut(Axis(0), hi).assign(&a);
        }
        let y = self.proj(&ctx, &self.wo, &self.bo);
        (
            y,
            MhaCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                ctx,
            },
        )
    }

    /// Backward pass. Accumulates parameter grads, returns grad wrt input.
    /// When `attn_grad_out` is given it receives `dL/dA` per head
    /// (post-softmax), which is what relevancy propagation needs.
    pub fn backward(
        &mut self,
        cache: &MhaCache,
        grad_y: &Array2<f32>,
        mut attn_grad_out: Option<&mut Array3<f32>>,
    ) -> Array2<f32> {
        let (n, d) = cache.x.dim();
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();

        // output projection
        let wo = self.wo.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let grad_ctx = grad_y.dot(&wo);
        self.wo.grad += &grad_y.t().dot(&cache.ctx).into_dyn();
        {
            let mut bg = self.bo.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &grad_y.sum_axis(Axis(0));
        }

        let mut grad_q = Array2::zeros((n, d));
        let mut grad_k = Array2::zeros((n, d));
        let mut grad_v = Array2::zeros((n, d));
        for hi in 0..h {
            let cols = s![.., hi * dh..(hi + 1) * dh];
            let a = cache.attn.index_axis(Axis(0), hi);
            let gctx_h = grad_ctx.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);

            let grad_a = gctx_h.dot(&vh.t()); // dL/dA, post-softmax
            if let Some(out) = attn_grad_out.as_deref_mut() {
                out.index_axis_mut(Axis(0), hi).assign(&grad_a);
            }
            grad_v.slice_mut(cols).assign(&a.t().dot(&gctx_h));
            let grad_s = row_softmax_backward(&a.to_owned(), &grad_a);
            grad_q.slice_mut(cols).assign(&(grad_s.dot(&kh) * scale));
            grad_k.slice_mut(cols).assign(&(grad_s.t().dot(&qh) * scale));
        }

        // input projections
        let mut grad_x: Array2<f32> = Array2::zeros((n, d));
        for (gp, w, b) in [
            (&grad_q, &mut self.wq, &mut self.bq),
            (&grad_k, &mut self.wk, &mut self.bk),
            (&grad_v, &mut self.wv, &mut self.bv),
        ] {
            let wv2 = w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            grad_x += &gp.dot(&wv2);
            w.grad += &gp.t().dot(&cache.x).into_dyn();
            let mut bg = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &gp.sum_axis(Axis(0));
        }
        grad_x
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.wq);
        out.push(&mut self.wk);
        out.push(&mut self.wv);
        out.push(&mut self.wo);
        out.push(&mut self.bq);
        out.push(&mut self.bk);
        out.push(&mut self.bv);
        out.push(&mut self.bo);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.wq, &self.wk, &self.wv, &self.wo, &self.bq, &self.bk, &self.bv, &self.bo,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    #[test]
    fn single_token_attends_to_itself() {
        let y = Array2::from_shape_vec((1, 3), vec![0.2, -0.4, 1.0]).unwrap();
        let w = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.1 });
        let (out, a) = single_head_attention(&y, &w, &w, &w);
        assert_eq!(a.dim(), (1, 1));
        assert!((a[[0, 0]] - 1.0).abs() < 1e-7);
        let v = y.dot(&w.t());
        for j in 0..3 {
            assert!((out[[0, j]] - v[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_scores_give_uniform_attention() {
        let y = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f32);
        let wzero = Array2::zeros((3, 3));
        let wv = Array2::eye(3);
        let (_, a) = single_head_attention(&y, &wzero, &wzero, &wv);
        for v in a.iter() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn mha_rows_sum_to_one() {
        let mut rng = stream(5, &[tag("mha")]);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng);
        let x = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 7 + j) % 5) as f32 * 0.3 - 0.6);
        let (_, cache) = mha.forward(&x);
        for hi in 0..2 {
            for i in 0..6 {
                let s: f32 = cache.attn.slice(s![hi, i, ..]).sum();
                assert!((s - 1.0).abs() < 1e-6, "head {hi} row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn mha_single_head_matches_primitive() {
        let mut rng = stream(6, &[tag("mha")]);
        let mha = MultiHeadAttention::new("a", 4, 1, &mut rng);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| 0.2 * (i as f32) - 0.1 * (j as f32));
        let (y, cache) = mha.forward(&x);
        let to2 = |p: &Param| {
            p.value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let (ctx_ref, a_ref) =
            single_head_attention(&x, &to2(&mha.wq), &to2(&mha.wk), &to2(&mha.wv));
        for (a, b) in cache.attn.index_axis(Axis(0), 0).iter().zip(a_ref.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let wo = to2(&mha.wo);
        let y_ref = ctx_ref.dot(&wo.t());
        for (a, b) in y.iter().zip(y_ref.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mha_backward_matches_finite_differences() {
        let mut rng = stream(7, &[tag("mha")]);
        let mut mha = MultiHeadAttention::new("a", 4, 2, &mut rng);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| 0.3 * (i as f32) - 0.2 * (j as f32) + 0.1);
        let (y, cache) = mha.forward(&x);
        let gx = mha.backward(&cache, &y, None); // loss = sum(y^2)/2
        let loss = |xx: &Array2<f32>| mha.forward(xx).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
        let eps = 1e-2f32;
        for idx in [[0usize, 0usize], [1, 2], [2, 3], [0, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (fd - gx[idx]).abs() < 3e-2 * fd.abs().max(0.5),
                "idx {idx:?} fd {fd} vs {}",
                gx[idx]
            );
        }
    }

    #[test]
    fn captured_attention_grad_matches_finite_differences() {
        // Perturb A directly in a frozen copy of the downstream computation:
        // y = (A V) Woᵀ + bo, loss = sum(y^2)/2.
        let mut rng = stream(8, &[tag("mha")]);
        let mut mha = MultiHeadAttention::new("a", 4, 2, &mut rng);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| 0.25 * (i as f32) - 0.15 * (j as f32));
        let (y, cache) = mha.forward(&x);
        let mut grad_a = Array3::zeros((2, 3, 3));
        mha.backward(&cache, &y, Some(&mut grad_a));

        let wo = mha.wo.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let bo = mha.bo.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let recompute = |attn: &Array3<f32>| -> f32 {
            let mut ctx = Array2::zeros((3, 4));
            for hi in 0..2 {
                let a = attn.index_axis(Axis(0), hi);
                let vh = cache.v.slice(s![.., hi * 2..(hi + 1) * 2]);
                ctx.slice_mut(s![.., hi * 2..(hi + 1) * 2]).assign(&a.dot(&vh));
            }
            let mut yy = ctx.dot(&wo.t());
            yy += &bo;
            yy.iter().map(|v| v * v).sum::<f32>() / 2.0
        };
        let eps = 1e-3f32;
        for idx in [[0usize, 0usize, 1usize], [1, 2, 0], [0, 1, 2]] {
            let mut ap = cache.attn.clone();
            ap[idx] += eps;
            let mut am = cache.attn.clone();
            am[idx] -= eps;
            let fd = (recompute(&ap) - recompute(&am)) / (2.0 * eps);
            assert!(
                (fd - grad_a[idx]).abs() < 3e-2 * fd.abs().max(0.5),
                "idx {idx:?} fd {fd} vs {}",
                grad_a[idx]
            );
        }
    }
}
