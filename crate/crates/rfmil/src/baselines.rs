//! Comparison methods: supervised ROI classification with mean aggregation,
//! SSL + linear / SSL + finetune variants, and (gated) attention-based
//! instance pooling trained end-to-end.

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::ParamSnapshot;
use crate::dataset::CoreSet;
use crate::error::{Error, Result};
use crate::eval::compute_metrics;
use crate::transformer::ClassScores;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rfmil_nn::rng::{stream, tag};
use rfmil_nn::{Adam, Linear, Param, WarmupCosine};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    SupervisedRoi,
    SslLinear,
    SslFinetune,
    AttentionMil,
    GatedAttentionMil,
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised_roi" => Ok(BaselineKind::SupervisedRoi),
            "ssl_linear" => Ok(BaselineKind::SslLinear),
            "ssl_finetune" => Ok(BaselineKind::SslFinetune),
            "attention_mil" => Ok(BaselineKind::AttentionMil),
            "gated_attention_mil" => Ok(BaselineKind::GatedAttentionMil),
            other => Err(Error::InvalidInput(format!("unknown baseline kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaselineKind::SupervisedRoi => "supervised_roi",
            BaselineKind::SslLinear => "ssl_linear",
            BaselineKind::SslFinetune => "ssl_finetune",
            BaselineKind::AttentionMil => "attention_mil",
            BaselineKind::GatedAttentionMil => "gated_attention_mil",
        };
        write!(f, "{s}")
    }
}

/// Core probability as the arithmetic mean of its ROI probabilities.
pub fn aggregate_mean(roi_probs: &[f64]) -> Result<f64> {
    if roi_probs.is_empty() {
        return Err(Error::EmptyBag("mean aggregation over an empty bag".into()));
    }
    Ok(roi_probs.iter().sum::<f64>() / roi_probs.len() as f64)
}

// --- attention-based instance pooling ---------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MilAttentionConfig {
    /// Attention hidden width L.
    pub attention_dim: usize,
    pub gated: bool,
}

impl Default for MilAttentionConfig {
    fn default() -> Self {
        MilAttentionConfig {
            attention_dim: 128,
            gated: false,
        }
    }
}

/// `a_i = softmax_i(wᵀ tanh(V h_i))`, gated variant
/// `a_i = softmax_i(wᵀ(tanh(V h_i) ⊙ σ(U h_i)))`; the bag embedding
/// `Σ a_i h_i` feeds a linear classifier.
pub struct MilAttention {
    pub v: Param,
    pub w: Param,
    pub u: Option<Param>,
    pub classifier: Linear,
}

pub struct MilCache {
    h: Array2<f32>,
    t: Array2<f32>,
    g: Option<Array2<f32>>,
    a: Array1<f32>,
    emb: Array2<f32>,
}

impl MilAttention {
    pub fn new(cfg: &MilAttentionConfig, input_dim: usize, rng: &mut impl Rng) -> Self {
        let l = cfg.attention_dim;
        MilAttention {
            v: Param::randn("mil.v", &[l, input_dim], input_dim, 1.0, rng),
            w: Param::randn("mil.w", &[l], l, 1.0, rng),
            u: cfg
                .gated
                .then(|| Param::randn("mil.u", &[l, input_dim], input_dim, 1.0, rng)),
            classifier: Linear::new("mil.classifier", input_dim, 2, rng),
        }
    }

    pub fn forward(&self, features: &Array2<f32>) -> (ClassScores, Array1<f32>, MilCache) {
        let v = self.v.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let t = features.dot(&v.t()).mapv(f32::tanh); // [n, L]
        let (scores_in, g) = match &self.u {
            Some(u) => {
                let u = u.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = features.dot(&u.t()).mapv(|x| 1.0 / (1.0 + (-x).exp()));
                ((&t * &g).dot(&w), Some(g))
            }
            None => (t.dot(&w), None),
        };
        // softmax over instances
        let max = scores_in.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut a = scores_in.mapv(|s| (s - max).exp());
        let sum = a.sum();
        a.mapv_inplace(|x| x / sum);
        let emb = a
            .view()
            .insert_axis(Axis(0))
            .dot(features); // [1, d]
        let logits = self.classifier.forward(&emb);
        let scores = ClassScores::from_logits([logits[[0, 0]], logits[[0, 1]]]);
        (
            scores,
            a.clone(),
            MilCache {
                h: features.clone(),
                t,
                g,
                a,
                emb,
            },
        )
    }

    /// Accumulates parameter grads; returns grad wrt the input features.
    pub fn backward(&mut self, cache: &MilCache, grad_logits: [f32; 2]) -> Array2<f32> {
        let (n, d) = cache.h.dim();
        let g2 = Array2::from_shape_vec((1, 2), grad_logits.to_vec()).unwrap();
        let grad_emb = self.classifier.backward(&cache.emb, &g2); // [1, d]
        let grad_emb = grad_emb.row(0).to_owned();

        // emb = Σ a_i h_i
        let grad_a: Array1<f32> = cache.h.dot(&grad_emb); // [n]
        let mut grad_h = Array2::zeros((n, d));
        for i in 0..n {
            let ai = cache.a[i];
            grad_h.row_mut(i).assign(&(&grad_emb * ai));
        }
        // softmax backward over the instance axis
        let dot = (&grad_a * &cache.a).sum();
        let grad_s: Array1<f32> = (&grad_a - dot) * &cache.a;

        let w = self.w.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let v = self.v.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        match (&cache.g, &mut self.u) {
            (Some(g), Some(u)) => {
                let tg = &cache.t * g;
                {
                    let mut wg = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for i in 0..n {
                        wg += &(&tg.row(i) * grad_s[i]);
                    }
                }
                let uv = u.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                let mut grad_pre_t = Array2::zeros(cache.t.dim());
                let mut grad_pre_g = Array2::zeros(cache.t.dim());
                for i in 0..n {
                    for l in 0..w.len() {
                        let gt = grad_s[i] * w[l] * g[[i, l]];
                        let gg = grad_s[i] * w[l] * cache.t[[i, l]];
                        grad_pre_t[[i, l]] = gt * (1.0 - cache.t[[i, l]] * cache.t[[i, l]]);
                        grad_pre_g[[i, l]] = gg * g[[i, l]] * (1.0 - g[[i, l]]);
                    }
                }
                self.v.grad += &grad_pre_t.t().dot(&cache.h).into_dyn();
                u.grad += &grad_pre_g.t().dot(&cache.h).into_dyn();
                grad_h += &grad_pre_t.dot(&v);
                grad_h += &grad_pre_g.dot(&uv);
            }
            (None, None) => {
                {
                    let mut wg = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for i in 0..n {
                        wg += &(&cache.t.row(i) * grad_s[i]);
                    }
                }
                let mut grad_pre = Array2::zeros(cache.t.dim());
                for i in 0..n {
                    for l in 0..w.len() {
                        let gt = grad_s[i] * w[l];
                        grad_pre[[i, l]] = gt * (1.0 - cache.t[[i, l]] * cache.t[[i, l]]);
                    }
                }
                self.v.grad += &grad_pre.t().dot(&cache.h).into_dyn();
                grad_h += &grad_pre.dot(&v);
            }
            _ => unreachable!("gate cache and gate parameters always agree"),
        }
        grad_h
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.v);
        out.push(&mut self.w);
        if let Some(u) = &mut self.u {
            out.push(u);
        }
        self.classifier.collect_params(out);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.v, &self.w];
        if let Some(u) = &self.u {
            out.push(u);
        }
        out.extend(self.classifier.params());
        out
    }
}

/// Spec-facing single call: core logits plus instance weights.
pub fn attention_mil_forward(
    features: &Array2<f32>,
    params: &MilAttention,
) -> ([f32; 2], Vec<f32>) {
    let (scores, a, _) = params.forward(features);
    (scores.logits, a.to_vec())
}

// --- trainers ---------------------------------------------------------------

/// Shared training budget for baselines. Schedules for the comparison
/// methods reuse the main pipeline's shapes: warmup then cosine.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaselineBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    /// ROI-scale cap per epoch; 0 = full pool.
    pub max_batches_per_epoch: usize,
    pub cores_per_batch: usize,
}

impl Default for BaselineBudget {
    fn default() -> Self {
        BaselineBudget {
            epochs: 35,
            batch_size: 64,
            peak_lr: 1e-4,
            warmup_epochs: 2,
            max_batches_per_epoch: 0,
            cores_per_batch: 8,
        }
    }
}

pub struct RoiClassifier {
    pub backbone: Backbone,
    pub head: Linear,
}

impl RoiClassifier {
    pub fn new(bcfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(RoiClassifier {
            backbone: Backbone::new(bcfg, rng)?,
            head: Linear::new("roi_head", bcfg.feature_dim, 2, rng),
        })
    }

    /// Mean cancer probability over the bag's ROIs.
    pub fn core_score(&self, rois: &ndarray::Array3<f32>) -> Result<f64> {
        let (n, h, w) = rois.dim();
        if n == 0 {
            return Err(Error::EmptyBag("roi classifier got an empty bag".into()));
        }
        let mut probs = Vec::with_capacity(n);
        for chunk in (0..n).collect::<Vec<_>>().chunks(256) {
            let mut x = Array4::zeros((chunk.len(), 1, h, w));
            for (k, &i) in chunk.iter().enumerate() {
                x.index_axis_mut(Axis(0), k)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&rois.index_axis(Axis(0), i));
            }
            let f = self.backbone.features(&x);
            let logits = self.head.forward(&f);
            let p = rfmil_nn::loss::softmax_rows(&logits);
            for i in 0..chunk.len() {
                probs.push(f64::from(p[[i, 1]]));
            }
        }
        aggregate_mean(&probs)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.collect_params(out);
        self.head.collect_params(out);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.head.params());
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

pub struct BaselineOutcome {
    pub kind: BaselineKind,
    pub history: Vec<BaselineEpochRow>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub best: ParamSnapshot,
}

fn val_auroc_roi(model: &RoiClassifier, val: &CoreSet) -> Result<f64> {
    let mut scores = Vec::with_capacity(val.len());
    for core in &val.cores {
        scores.push(model.core_score(&core.bag.rois)?);
    }
    Ok(compute_metrics(&scores, &val.core_labels(), 0.5)?.auroc)
}

/// ROI-scale training on weak labels; `freeze_backbone` keeps the feature
/// extractor untouched (the linear-evaluation contract).
fn train_roi_scale(
    model: &mut RoiClassifier,
    train: &CoreSet,
    val: &CoreSet,
    budget: &BaselineBudget,
    freeze_backbone: bool,
    seed: u64,
    kind: BaselineKind,
) -> Result<BaselineOutcome> {
    let pool = train.roi_pool();
    if pool.len() < budget.batch_size {
        return Err(Error::InvalidInput("ROI pool smaller than one batch".into()));
    }
    let (h, w) = {
        let d = train.cores[0].bag.rois.dim();
        (d.1, d.2)
    };
    let batches_per_epoch = {
        let full = pool.len() / budget.batch_size;
        if budget.max_batches_per_epoch > 0 {
            full.min(budget.max_batches_per_epoch).max(1)
        } else {
            full.max(1)
        }
    };
    let schedule = WarmupCosine::new(
        budget.peak_lr as f32,
        (budget.warmup_epochs * batches_per_epoch) as u64,
        (budget.epochs * batches_per_epoch) as u64,
    );
    let mut adam = Adam::default();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSnapshot)> = None;
    let mut step = 0u64;

    for epoch in 0..budget.epochs {
        let mut order = pool.clone();
        let mut rng = stream(seed, &[tag("baseline-shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for bi in 0..batches_per_epoch {
            let batch = &order[bi * budget.batch_size..(bi + 1) * budget.batch_size];
            let mut x = Array4::zeros((batch.len(), 1, h, w));
            let mut labels = Vec::with_capacity(batch.len());
            for (k, &(ci, ri)) in batch.iter().enumerate() {
                x.index_axis_mut(Axis(0), k)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&train.cores[ci].bag.rois.index_axis(Axis(0), ri));
                labels.push(train.cores[ci].label);
            }
            let lr = schedule.lr(step);
            let loss = if freeze_backbone {
                let f = model.backbone.features(&x);
                let logits = model.head.forward(&f);
                let (loss, grad) = rfmil_nn::loss::cross_entropy(&logits, &labels);
                model.head.backward(&f, &grad);
                let mut params = Vec::new();
                model.head.collect_params(&mut params);
                adam.step(&mut params, &|_| lr);
                for p in params {
                    p.zero_grad();
                }
                loss
            } else {
                let (f, cache) = model.backbone.forward(&x);
                let logits = model.head.forward(&f);
                let (loss, grad) = rfmil_nn::loss::cross_entropy(&logits, &labels);
                let grad_f = model.head.backward(&f, &grad);
                model.backbone.backward(&cache, &grad_f);
                let mut params = Vec::new();
                model.collect_params(&mut params);
                adam.step(&mut params, &|_| lr);
                for p in params {
                    p.zero_grad();
                }
                loss
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite baseline loss at epoch {epoch}"
                )));
            }
            epoch_loss += f64::from(loss);
            step += 1;
        }

        let val_auroc = val_auroc_roi(model, val)?;
        history.push(BaselineEpochRow {
            epoch,
            train_loss: epoch_loss / batches_per_epoch as f64,
            val_auroc,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_auroc > *b);
        if improved {
            let mut params = Vec::new();
            model.collect_params(&mut params);
            best = Some((epoch, val_auroc, ParamSnapshot::capture_mut(&params)));
        }
    }
    let (best_epoch, best_val_auroc, best) = best.unwrap();
    Ok(BaselineOutcome {
        kind,
        history,
        best_epoch,
        best_val_auroc,
        best,
    })
}

pub struct MilModel {
    pub backbone: Backbone,
    pub head: MilAttention,
}

impl MilModel {
    pub fn predict(&self, rois: &ndarray::Array3<f32>) -> Result<ClassScores> {
        let (n, h, w) = rois.dim();
        if n == 0 {
            return Err(Error::EmptyBag("MIL got an empty bag".into()));
        }
        let mut x = Array4::zeros((n, 1, h, w));
        for i in 0..n {
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&rois.index_axis(Axis(0), i));
        }
        let f = self.backbone.features(&x);
        Ok(self.head.forward(&f).0)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.collect_params(out);
        self.head.collect_params(out);
    }
}

fn val_auroc_mil(model: &MilModel, val: &CoreSet) -> Result<f64> {
    let mut scores = Vec::with_capacity(val.len());
    for core in &val.cores {
        scores.push(f64::from(model.predict(&core.bag.rois)?.cancer_probability()));
    }
    Ok(compute_metrics(&scores, &val.core_labels(), 0.5)?.auroc)
}

/// Attention-MIL trained end-to-end from scratch on core labels.
fn train_mil(
    model: &mut MilModel,
    train: &CoreSet,
    val: &CoreSet,
    budget: &BaselineBudget,
    seed: u64,
    kind: BaselineKind,
) -> Result<BaselineOutcome> {
    let steps_per_epoch = train.len().div_ceil(budget.cores_per_batch) as u64;
    let schedule = WarmupCosine::new(
        budget.peak_lr as f32,
        budget.warmup_epochs as u64 * steps_per_epoch,
        budget.epochs as u64 * steps_per_epoch,
    );
    let mut adam = Adam::default();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSnapshot)> = None;
    let mut step = 0u64;

    for epoch in 0..budget.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = stream(seed, &[tag("mil-shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(budget.cores_per_batch) {
            let lr = schedule.lr(step);
            let mut batch_loss = 0.0;
            for &ci in batch {
                let core = &train.cores[ci];
                let (n, h, w) = core.bag.rois.dim();
                let mut x = Array4::zeros((n, 1, h, w));
                for i in 0..n {
                    x.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&core.bag.rois.index_axis(Axis(0), i));
                }
                let (f, bb_cache) = model.backbone.forward(&x);
                let (scores, _, mil_cache) = model.head.forward(&f);
                let logits = Array2::from_shape_vec((1, 2), scores.logits.to_vec()).unwrap();
                let (loss, grad) = rfmil_nn::loss::cross_entropy(&logits, &[core.label]);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite MIL loss on core {}",
                        core.core_id
                    )));
                }
                batch_loss += f64::from(loss);
                let scale = 1.0 / batch.len() as f32;
                let grad_f = model
                    .head
                    .backward(&mil_cache, [grad[[0, 0]] * scale, grad[[0, 1]] * scale]);
                model.backbone.backward(&bb_cache, &grad_f);
            }
            epoch_loss += batch_loss / batch.len() as f64;
            n_batches += 1;
            let mut params = Vec::new();
            model.collect_params(&mut params);
            adam.step(&mut params, &|_| lr);
            for p in params {
                p.zero_grad();
            }
            step += 1;
        }
        let val_auroc = val_auroc_mil(model, val)?;
        history.push(BaselineEpochRow {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_auroc,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_auroc > *b);
        if improved {
            let mut params = Vec::new();
            model.collect_params(&mut params);
            best = Some((epoch, val_auroc, ParamSnapshot::capture_mut(&params)));
        }
    }
    let (best_epoch, best_val_auroc, best) = best.unwrap();
    Ok(BaselineOutcome {
        kind,
        history,
        best_epoch,
        best_val_auroc,
        best,
    })
}

/// Train one comparison method. `stage1` supplies the pretrained backbone
/// for the SSL-derived kinds and must be present for them.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline(
    kind: BaselineKind,
    bcfg: &BackboneConfig,
    mil_cfg: &MilAttentionConfig,
    train: &CoreSet,
    val: &CoreSet,
    budget: &BaselineBudget,
    stage1: Option<&ParamSnapshot>,
    seed: u64,
) -> Result<(BaselineOutcome, RoiOrMil)> {
    let mut rng = stream(seed, &[tag("baseline-init"), tag(&kind.to_string())]);
    match kind {
        BaselineKind::SupervisedRoi | BaselineKind::SslLinear | BaselineKind::SslFinetune => {
            let mut model = RoiClassifier::new(bcfg, &mut rng)?;
            let freeze = kind == BaselineKind::SslLinear;
            if matches!(kind, BaselineKind::SslLinear | BaselineKind::SslFinetune) {
                let snap = stage1.ok_or_else(|| {
                    Error::InvalidInput(format!("{kind} needs a stage-1 checkpoint"))
                })?;
                let mut params = Vec::new();
                model.backbone.collect_params(&mut params);
                snap.restore(&mut params)?;
            }
            let out = train_roi_scale(&mut model, train, val, budget, freeze, seed, kind)?;
            Ok((out, RoiOrMil::Roi(model)))
        }
        BaselineKind::AttentionMil | BaselineKind::GatedAttentionMil => {
            let cfg = MilAttentionConfig {
                gated: kind == BaselineKind::GatedAttentionMil,
                ..mil_cfg.clone()
            };
            let mut model = MilModel {
                backbone: Backbone::new(bcfg, &mut rng)?,
                head: MilAttention::new(&cfg, bcfg.feature_dim, &mut rng),
            };
            let out = train_mil(&mut model, train, val, budget, seed, kind)?;
            Ok((out, RoiOrMil::Mil(model)))
        }
    }
}

pub enum RoiOrMil {
    Roi(RoiClassifier),
    Mil(MilModel),
}

impl RoiOrMil {
    /// Cancer score for one bag under whichever model this is.
    pub fn core_score(&self, rois: &ndarray::Array3<f32>) -> Result<f64> {
        match self {
            RoiOrMil::Roi(m) => m.core_score(rois),
            RoiOrMil::Mil(m) => Ok(f64::from(m.predict(rois)?.cancer_probability())),
        }
    }
}
