//! Transformer aggregator: a bag of ROI features becomes one core-level
//! class score.
//!
//! Features are projected from 512 to the inner dimension, learnable
//! positional embeddings indexed by the quantized (axial, lateral) grid
//! position are added, and a stack of pre-normalization encoder blocks
//! (norm → attention → residual, norm → MLP → residual) contextualizes the
//! bag. The final state is layer-normalized, mean-pooled over the sequence,
//! and classified by a linear layer.
//!
//! Every block's post-softmax attention matrices are cached on the forward
//! pass, and the backward pass can hand out `∂score/∂A` per block, which is
//! exactly what relevancy propagation consumes. Attention memory grows as
//! O(n²) per block in the bag size.

use crate::error::{Error, Result};
use crate::preprocess::{RoiPosition, RoiSpec};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rfmil_nn::norm::LayerNormCache;
use rfmil_nn::{Linear, MhaCache, MultiHeadAttention, Param};
use rfmil_nn::norm::LayerNorm;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Inner dimension d.
    pub dim: usize,
    pub mlp_dim: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub roi_dropout_rate: f64,
    /// Positional table extents (axial, lateral) in grid cells; bag
    /// positions outside this grid are an error, never clamped.
    pub max_grid: (usize, usize),
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            blocks: 12,
            heads: 8,
            dim: 256,
            mlp_dim: 512,
            input_dim: crate::backbone::FEATURE_DIM,
            num_classes: 2,
            roi_dropout_rate: 0.2,
            max_grid: (64, 64),
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidInput("binary classification only".into()));
        }
        if !(0.0..=1.0).contains(&self.roi_dropout_rate) {
            return Err(Error::InvalidInput("roi_dropout_rate outside [0,1]".into()));
        }
        if self.blocks == 0 || self.max_grid.0 == 0 || self.max_grid.1 == 0 {
            return Err(Error::InvalidInput("degenerate transformer config".into()));
        }
        Ok(())
    }
}

/// Core-level scores: raw logits (benign, cancer) and their softmax.
#[derive(Debug, Clone, Copy)]
pub struct ClassScores {
    pub logits: [f32; 2],
    pub probabilities: [f32; 2],
}

impl ClassScores {
    pub fn from_logits(logits: [f32; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        ClassScores {
            logits,
            probabilities: [e0 / (e0 + e1), e1 / (e0 + e1)],
        }
    }

    pub fn cancer_probability(&self) -> f32 {
        self.probabilities[1]
    }
}

/// Keep each index with probability `1 - rate`; an empty draw retains one
/// index chosen uniformly so a bag never vanishes. Evaluation skips dropout
/// entirely.
pub fn roi_dropout(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n > 0, "bag must be nonempty");
    let mut kept: Vec<usize> = (0..n).filter(|_| !rng.gen_bool(rate)).collect();
    if kept.is_empty() {
        kept.push(rng.gen_range(0..n));
    }
    kept
}

struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache {
    ln1: LayerNormCache,
    mha: MhaCache,
    ln2: LayerNormCache,
    m_in: Array2<f32>,
    h: Array2<f32>,
    g: Array2<f32>,
}

impl EncoderBlock {
    fn new(name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), cfg.dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), cfg.dim, cfg.heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), cfg.dim),
            fc1: Linear::new(&format!("{name}.fc1"), cfg.dim, cfg.mlp_dim, rng),
            fc2: Linear::new(&format!("{name}.fc2"), cfg.mlp_dim, cfg.dim, rng),
        }
    }

    fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, BlockCache) {
        let (a_in, ln1) = self.ln1.forward(x);
        let (a_out, mha) = self.attn.forward(&a_in);
        let x1 = x + &a_out;
        let (m_in, ln2) = self.ln2.forward(&x1);
        let h = self.fc1.forward(&m_in);
        let g = rfmil_nn::act::gelu2(&h);
        let m_out = self.fc2.forward(&g);
        let x2 = &x1 + &m_out;
        (
            x2,
            BlockCache {
                ln1,
                mha,
                ln2,
                m_in,
                h,
                g,
            },
        )
    }

    fn backward(
        &mut self,
        cache: &BlockCache,
        grad_out: &Array2<f32>,
        attn_grad: Option<&mut Array3<f32>>,
    ) -> Array2<f32> {
        let grad_g = self.fc2.backward(&cache.g, grad_out);
        let grad_h = rfmil_nn::act::gelu2_backward(&cache.h, &grad_g);
        let grad_m_in = self.fc1.backward(&cache.m_in, &grad_h);
        let mut grad_x1 = grad_out.clone();
        grad_x1 += &self.ln2.backward(&cache.ln2, &grad_m_in);
        let grad_a_in = self.attn.backward(&cache.mha, &grad_x1, attn_grad);
        let mut grad_x = grad_x1;
        grad_x += &self.ln1.backward(&cache.ln1, &grad_a_in);
        grad_x
    }
}

pub struct CoreTransformer {
    pub config: TransformerConfig,
    input_proj: Linear,
    pos_table: Param,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    classifier: Linear,
}

pub struct TransformerCache {
    features: Array2<f32>,
    pos_rows: Vec<usize>,
    x0: Array2<f32>,
    blocks: Vec<(BlockCache, Array2<f32>)>,
    final_ln: LayerNormCache,
    normed: Array2<f32>,
    pooled: Array2<f32>,
}

impl TransformerCache {
    /// Post-softmax attention per block, `[heads, n, n]` each.
    pub fn attention_maps(&self) -> Vec<Array3<f32>> {
        self.blocks.iter().map(|(b, _)| b.mha.attn.clone()).collect()
    }

    /// Mean-pooled, normalized representation fed to the classifier.
    pub fn pooled(&self) -> Vec<f32> {
        self.pooled.row(0).to_vec()
    }
}

impl CoreTransformer {
    pub fn new(config: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n_pos = config.max_grid.0 * config.max_grid.1;
        // small-scale init, matching usual learned positional tables
        let pos_table = Param::randn(
            "transformer.pos",
            &[n_pos, config.dim],
            config.dim,
            0.3,
            rng,
        );
        let blocks = (0..config.blocks)
            .map(|i| EncoderBlock::new(&format!("transformer.b{i}"), config, rng))
            .collect();
        Ok(CoreTransformer {
            input_proj: Linear::new("transformer.proj", config.input_dim, config.dim, rng),
            pos_table,
            blocks,
            final_ln: LayerNorm::new("transformer.final_ln", config.dim),
            classifier: Linear::new("transformer.classifier", config.dim, config.num_classes, rng),
            config: config.clone(),
        })
    }

    /// Map bag positions to positional-table rows; unseen positions error.
    pub fn pos_rows(&self, positions: &[RoiPosition], spec: &RoiSpec) -> Result<Vec<usize>> {
        let (max_ax, max_lat) = self.config.max_grid;
        positions
            .iter()
            .map(|p| {
                let ia = spec.grid_index(p.axial_mm);
                let il = spec.grid_index(p.lateral_mm);
                if ia >= max_ax || il >= max_lat {
                    return Err(Error::InvalidInput(format!(
                        "grid position ({ia}, {il}) outside positional table {max_ax}x{max_lat}"
                    )));
                }
                Ok(ia * max_lat + il)
            })
            .collect()
    }

    /// Forward over a bag of features `[n, input_dim]` with positional rows.
    pub fn forward(
        &self,
        features: &Array2<f32>,
        pos_rows: &[usize],
    ) -> Result<(ClassScores, TransformerCache)> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::EmptyBag("transformer got an empty bag".into()));
        }
        if pos_rows.len() != n {
            return Err(Error::InvalidInput("positions/features length mismatch".into()));
        }
        let mut x = self.input_proj.forward(features);
        let pos = self
            .pos_table
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for (i, &r) in pos_rows.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &pos.row(r);
        }
        let x0 = x.clone();

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&x);
            blocks.push((cache, x));
            x = next;
        }
        let (normed, final_ln) = self.final_ln.forward(&x);
        let pooled = normed
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        let logits = self.classifier.forward(&pooled);
        let scores = ClassScores::from_logits([logits[[0, 0]], logits[[0, 1]]]);
        Ok((
            scores,
            TransformerCache {
                features: features.clone(),
                pos_rows: pos_rows.to_vec(),
                x0,
                blocks,
                final_ln,
                normed,
                pooled,
            },
        ))
    }

    /// Backward from a gradient on the two logits. Accumulates parameter
    /// grads, optionally captures `∂/∂A` per block (forward block order),
    /// and returns the gradient with respect to the input features.
    pub fn backward(
        &mut self,
        cache: &TransformerCache,
        grad_logits: [f32; 2],
        mut attn_grads: Option<&mut Vec<Array3<f32>>>,
    ) -> Array2<f32> {
        let n = cache.features.nrows();
        let g = Array2::from_shape_vec((1, 2), vec![grad_logits[0], grad_logits[1]]).unwrap();
        let grad_pooled = self.classifier.backward(&cache.pooled, &g);
        // mean pool: spread evenly over sequence positions
        let mut grad_normed = Array2::zeros(cache.normed.dim());
        let scale = 1.0 / n as f32;
        for i in 0..n {
            for j in 0..grad_normed.ncols() {
                grad_normed[[i, j]] = grad_pooled[[0, j]] * scale;
            }
        }
        let mut grad = self.final_ln.backward(&cache.final_ln, &grad_normed);

        if let Some(out) = attn_grads.as_deref_mut() {
            out.clear();
            out.resize(
                self.blocks.len(),
                Array3::zeros((self.config.heads, n, n)),
            );
        }
        for (bi, (b, (bcache, _))) in self
            .blocks
            .iter_mut()
            .zip(cache.blocks.iter())
            .enumerate()
            .rev()
        {
            let slot = attn_grads.as_deref_mut().map(|v| &mut v[bi]);
            grad = b.backward(bcache, &grad, slot);
        }

        // positional rows accumulate, projection takes the rest
        let _ = &cache.x0;
        for (i, &r) in cache.pos_rows.iter().enumerate() {
            let mut prow = self
                .pos_table
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut prow = prow.row_mut(r);
            prow += &grad.row(i);
        }
        self.input_proj.backward(&cache.features, &grad)
    }

    /// Zero the positional table (used by the permutation-symmetry checks).
    pub fn zero_positional_table(&mut self) {
        self.pos_table.value.fill(0.0);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.input_proj.collect_params(out);
        out.push(&mut self.pos_table);
        for b in &mut self.blocks {
            b.ln1.collect_params(out);
            b.attn.collect_params(out);
            b.ln2.collect_params(out);
            b.fc1.collect_params(out);
            b.fc2.collect_params(out);
        }
        self.final_ln.collect_params(out);
        self.classifier.collect_params(out);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.input_proj.params();
        v.push(&self.pos_table);
        for b in &self.blocks {
            v.extend(b.ln1.params());
            v.extend(b.attn.params());
            v.extend(b.ln2.params());
            v.extend(b.fc1.params());
            v.extend(b.fc2.params());
        }
        v.extend(self.final_ln.params());
        v.extend(self.classifier.params());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Zero the classifier weights; with them, every class gradient.
    pub fn zero_classifier(&mut self) {
        self.classifier.w.value.fill(0.0);
        self.classifier.b.value.fill(0.0);
    }
}
