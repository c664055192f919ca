//! Residual convolutional feature extractor for single-channel ROIs.
//!
//! Pre-activation residual blocks (norm → relu → conv, twice) with a
//! stride-2 entry per stage, then GroupNorm → ReLU → global average pool →
//! linear head to the fixed 512-dimensional feature vector. Stage widths
//! scale with the ROI resolution; the feature dimension does not.

use crate::error::{Error, Result};
use ndarray::{Array2, Array4};
use rand::Rng;
use rfmil_nn::{Conv2d, ConvCache, GlobalAvgPool, GroupNorm, Linear, Param};
use serde::{Deserialize, Serialize};

pub const FEATURE_DIM: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub gn_groups: usize,
    /// Output feature dimension; fixed at 512.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 64,
            stem_stride: 2,
            stage_channels: vec![64, 128, 256, 512],
            gn_groups: 8,
            feature_dim: FEATURE_DIM,
        }
    }
}

impl BackboneConfig {
    /// Compact variant for low-resolution ROIs.
    pub fn compact() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stem_stride: 1,
            stage_channels: vec![16, 32, 64, 128],
            gn_groups: 8,
            feature_dim: FEATURE_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "feature_dim must be {FEATURE_DIM}, got {}",
                self.feature_dim
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::InvalidInput("need at least one stage".into()));
        }
        for &c in std::iter::once(&self.stem_channels).chain(&self.stage_channels) {
            if c % self.gn_groups != 0 {
                return Err(Error::InvalidInput(format!(
                    "channel count {c} not divisible by gn_groups {}",
                    self.gn_groups
                )));
            }
        }
        if !(self.stem_stride == 1 || self.stem_stride == 2) {
            return Err(Error::InvalidInput("stem_stride must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Pre-activation residual block with stride-2 downsampling at entry.
#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Conv2d,
}

struct BlockCache {
    gn1: rfmil_nn::norm::GroupNormCache,
    a1: Array4<f32>,
    conv1: ConvCache,
    gn2: rfmil_nn::norm::GroupNormCache,
    a2: Array4<f32>,
    conv2: ConvCache,
    skip: ConvCache,
}

impl ResBlock {
    fn new(name: &str, in_c: usize, out_c: usize, groups: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(&format!("{name}.gn1"), in_c, groups),
            conv1: Conv2d::new(&format!("{name}.conv1"), in_c, out_c, 3, 2, 1, rng),
            gn2: GroupNorm::new(&format!("{name}.gn2"), out_c, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1, rng),
            skip: Conv2d::new(&format!("{name}.skip"), in_c, out_c, 1, 2, 0, rng),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let (n1, gn1) = self.gn1.forward(x);
        let a1 = rfmil_nn::act::relu4(&n1);
        let (h1, conv1) = self.conv1.forward(&a1);
        let (n2, gn2) = self.gn2.forward(&h1);
        drop(h1);
        let a2 = rfmil_nn::act::relu4(&n2);
        let (h2, conv2) = self.conv2.forward(&a2);
        let (sk, skip) = self.skip.forward(x);
        let y = &h2 + &sk;
        (
            y,
            BlockCache {
                gn1,
                a1,
                conv1,
                gn2,
                a2,
                conv2,
                skip,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache, grad_y: &Array4<f32>) -> Array4<f32> {
        let mut grad_x = self.skip.backward(&cache.skip, grad_y);
        let grad_a2 = self.conv2.backward(&cache.conv2, grad_y);
        // relu input was gn2 output = a2 pre-mask; reuse mask from a2 > 0
        let grad_n2 = rfmil_nn::act::relu4_backward(&cache.a2, &grad_a2);
        let grad_h1 = self.gn2.backward(&cache.gn2, &grad_n2);
        let grad_a1 = self.conv1.backward(&cache.conv1, &grad_h1);
        let grad_n1 = rfmil_nn::act::relu4_backward(&cache.a1, &grad_a1);
        grad_x += &self.gn1.backward(&cache.gn1, &grad_n1);
        grad_x
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.gn1.collect_params(out);
        self.conv1.collect_params(out);
        self.gn2.collect_params(out);
        self.conv2.collect_params(out);
        self.skip.collect_params(out);
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.gn1.params();
        v.extend(self.conv1.params());
        v.extend(self.gn2.params());
        v.extend(self.conv2.params());
        v.extend(self.skip.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head_norm: GroupNorm,
    head: Linear,
    gap: GlobalAvgPool,
}

pub struct BackboneCache {
    stem: ConvCache,
    stem_out: Array4<f32>,
    blocks: Vec<(BlockCache, Array4<f32>)>,
    head_gn: rfmil_nn::norm::GroupNormCache,
    head_act: Array4<f32>,
    pooled_shape: (usize, usize, usize, usize),
    pooled: Array2<f32>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(
            "backbone.stem",
            1,
            config.stem_channels,
            3,
            config.stem_stride,
            1,
            rng,
        );
        let mut blocks = Vec::new();
        let mut in_c = config.stem_channels;
        for (i, &out_c) in config.stage_channels.iter().enumerate() {
            blocks.push(ResBlock::new(
                &format!("backbone.s{i}"),
                in_c,
                out_c,
                config.gn_groups,
                rng,
            ));
            in_c = out_c;
        }
        Ok(Backbone {
            head_norm: GroupNorm::new("backbone.head_gn", in_c, config.gn_groups),
            head: Linear::new("backbone.head", in_c, config.feature_dim, rng),
            gap: GlobalAvgPool,
            stem,
            blocks,
            config: config.clone(),
        })
    }

    /// `[N, 1, H, W] -> [N, 512]`.
    pub fn forward(&self, x: &Array4<f32>) -> (Array2<f32>, BackboneCache) {
        let (mut h, stem) = self.stem.forward(x);
        let stem_out = h.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h);
            blocks.push((cache, h));
            h = next;
        }
        let (n, gn) = self.head_norm.forward(&h);
        let act = rfmil_nn::act::relu4(&n);
        let pooled = self.gap.forward(&act);
        let features = self.head.forward(&pooled);
        let pooled_shape = act.dim();
        (
            features,
            BackboneCache {
                stem,
                stem_out,
                blocks,
                head_gn: gn,
                head_act: act,
                pooled_shape,
                pooled,
            },
        )
    }

    /// Features without gradient bookkeeping (evaluation path).
    pub fn features(&self, x: &Array4<f32>) -> Array2<f32> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad_features: &Array2<f32>) {
        let grad_pooled = self.head.backward(&cache.pooled, grad_features);
        let grad_act = self.gap.backward(cache.pooled_shape, &grad_pooled);
        let grad_n = rfmil_nn::act::relu4_backward(&cache.head_act, &grad_act);
        let mut grad = self.head_norm.backward(&cache.head_gn, &grad_n);
        for (b, (cache, _)) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            grad = b.backward(cache, &grad);
        }
        let _ = cache.stem_out;
        self.stem.backward(&cache.stem, &grad);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem.collect_params(out);
        for b in &mut self.blocks {
            b.collect_params(out);
        }
        self.head_norm.collect_params(out);
        self.head.collect_params(out);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.head_norm.params());
        v.extend(self.head.params());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProjectorConfig {
    /// Hidden and output widths after the 512-d input; the last entry is the
    /// projection dimension.
    pub widths: Vec<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            widths: vec![1024, 1024, 1024],
        }
    }
}

impl ProjectorConfig {
    pub fn compact() -> Self {
        ProjectorConfig {
            widths: vec![512, 512],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidInput(
                "projector needs at least one hidden layer".into(),
            ));
        }
        Ok(())
    }
}

/// MLP projector mapping features to the embedding the loss sees.
/// ReLU between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Projector {
    layers: Vec<Linear>,
}

pub struct ProjectorCache {
    inputs: Vec<Array2<f32>>,
}

impl Projector {
    pub fn new(config: &ProjectorConfig, in_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut d = in_dim;
        for (i, &w) in config.widths.iter().enumerate() {
            layers.push(Linear::new(&format!("projector.l{i}"), d, w, rng));
            d = w;
        }
        Ok(Projector { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, ProjectorCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = l.forward(&h);
            if i + 1 < self.layers.len() {
                h = rfmil_nn::act::relu2(&h);
            }
        }
        (h, ProjectorCache { inputs })
    }

    pub fn backward(&mut self, cache: &ProjectorCache, grad_out: &Array2<f32>) -> Array2<f32> {
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // relu applied after layer i in forward; its input was the
                // pre-activation, recomputed from the cached layer input
                let pre = self.layers[i].forward(&cache.inputs[i]);
                grad = rfmil_nn::act::relu2_backward(&pre, &grad);
            }
            grad = self.layers[i].backward(&cache.inputs[i], &grad);
        }
        grad
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.layers {
            l.collect_params(out);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfmil_nn::rng::{stream, tag};

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 4,
            stem_stride: 1,
            stage_channels: vec![4, 8],
            gn_groups: 2,
            feature_dim: FEATURE_DIM,
        }
    }

    #[test]
    fn features_have_fixed_dimension() {
        let mut rng = stream(1, &[tag("bb")]);
        let bb = Backbone::new(&tiny_config(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((3, 1, 8, 8), |(n, _, h, w)| {
            (n * 64 + h * 8 + w) as f32 * 0.01
        });
        let (f, _) = bb.forward(&x);
        assert_eq!(f.dim(), (3, FEATURE_DIM));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_feature_dim_is_rejected() {
        let cfg = BackboneConfig {
            feature_dim: 128,
            ..tiny_config()
        };
        let mut rng = stream(1, &[tag("bb")]);
        assert!(Backbone::new(&cfg, &mut rng).is_err());
    }

    #[test]
    fn backward_populates_every_parameter_grad() {
        let mut rng = stream(2, &[tag("bb")]);
        let mut bb = Backbone::new(&tiny_config(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((2, 1, 8, 8), |(n, _, h, w)| {
            ((n + h + w) % 5) as f32 * 0.1 - 0.2
        });
        let (f, cache) = bb.forward(&x);
        bb.backward(&cache, &f);
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        for p in params {
            let norm: f32 = p.grad.iter().map(|v| v.abs()).sum();
            assert!(norm > 0.0, "param {} has zero grad", p.name);
        }
    }

    #[test]
    fn backbone_loss_gradient_matches_finite_differences() {
        let mut rng = stream(3, &[tag("bb")]);
        let mut bb = Backbone::new(&tiny_config(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, h, w)| {
            0.2 * ((h * 8 + w) % 7) as f32 - 0.5
        });
        // loss = sum(features^2)/2 wrt a single conv weight
        let loss = |bb: &Backbone| -> f32 {
            bb.forward(&x).0.iter().map(|v| v * v).sum::<f32>() / 2.0
        };
        let (f, cache) = bb.forward(&x);
        bb.backward(&cache, &f);
        let analytic = bb
            .params()
            .iter()
            .find(|p| p.name == "backbone.s1.conv2.w")
            .unwrap()
            .grad[[1, 0, 1, 1]];
        let eps = 1e-2f32;
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        let p = params
            .into_iter()
            .find(|p| p.name == "backbone.s1.conv2.w")
            .unwrap();
        let orig = p.value[[1, 0, 1, 1]];
        p.value[[1, 0, 1, 1]] = orig + eps;
        let lp = loss(&bb);
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        let p = params
            .into_iter()
            .find(|p| p.name == "backbone.s1.conv2.w")
            .unwrap();
        p.value[[1, 0, 1, 1]] = orig - eps;
        let lm = loss(&bb);
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (fd - analytic).abs() < 5e-2 * fd.abs().max(0.5),
            "fd {fd} vs analytic {analytic}"
        );
    }

    #[test]
    fn projector_shapes_and_backward() {
        let mut rng = stream(4, &[tag("proj")]);
        let cfg = ProjectorConfig {
            widths: vec![16, 12],
        };
        let mut proj = Projector::new(&cfg, 8, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 8), |(i, j)| 0.1 * (i as f32) - 0.05 * (j as f32));
        let (z, cache) = proj.forward(&x);
        assert_eq!(z.dim(), (5, 12));
        let gx = proj.backward(&cache, &z);
        assert_eq!(gx.dim(), (5, 8));
        // small step: relu kinks sit close to these pre-activations
        let eps = 1e-3f32;
        let loss = |p: &Projector| p.forward(&x).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
        for idx in [[0usize, 0usize], [2, 5], [4, 7]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let zp = proj.forward(&xp).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
            let zm = proj.forward(&xm).0.iter().map(|v| v * v).sum::<f32>() / 2.0;
            let fd = (zp - zm) / (2.0 * eps);
            assert!(
                (fd - gx[idx]).abs() < 3e-2 * fd.abs().max(0.5),
                "idx {idx:?} fd {fd} vs {}",
                gx[idx]
            );
        }
        let _ = loss;
    }

    #[test]
    fn single_hidden_layer_rejected_below_minimum() {
        let cfg = ProjectorConfig { widths: vec![64] };
        assert!(cfg.validate().is_err());
    }
}
