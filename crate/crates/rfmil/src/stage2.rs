//! Stage 2: end-to-end finetuning of the backbone and transformer on core
//! labels, with separate learning-rate schedules per parameter group.

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::checkpoint::ParamSnapshot;
use crate::dataset::{CoreSample, CoreSet};
use crate::error::{Error, Result};
use crate::eval::compute_metrics;
use crate::preprocess::RoiSpec;
use crate::relevancy::{roi_relevance_from_features, RelevancyPooling, RelevancyVector};
use crate::synth::CoreLabel;
use crate::transformer::{roi_dropout, ClassScores, CoreTransformer, TransformerCache, TransformerConfig};
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rfmil_nn::rng::{stream, tag};
use rfmil_nn::{Adam, Param, WarmupCosine};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage2Schedule {
    pub epochs: usize,
    pub transformer_peak_lr: f64,
    pub transformer_warmup_epochs: usize,
    pub backbone_peak_lr: f64,
    pub backbone_warmup_epochs: usize,
    pub cores_per_batch: usize,
}

impl Default for Stage2Schedule {
    fn default() -> Self {
        Stage2Schedule {
            epochs: 70,
            transformer_peak_lr: 1e-4,
            transformer_warmup_epochs: 5,
            backbone_peak_lr: 3e-5,
            backbone_warmup_epochs: 10,
            cores_per_batch: 8,
        }
    }
}

impl Stage2Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("stage-2 epochs must be >= 1".into()));
        }
        if self.transformer_warmup_epochs >= self.epochs
            || self.backbone_warmup_epochs >= self.epochs
        {
            return Err(Error::InvalidInput(
                "warmups must be shorter than the run".into(),
            ));
        }
        if self.cores_per_batch == 0 {
            return Err(Error::InvalidInput("cores_per_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Backbone plus aggregator, trained and evaluated as one unit.
pub struct Stage2Model {
    pub backbone: Backbone,
    pub transformer: CoreTransformer,
}

pub struct Stage2Cache {
    bb: BackboneCache,
    tf: TransformerCache,
}

impl Stage2Model {
    pub fn new(
        bcfg: &BackboneConfig,
        tcfg: &TransformerConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(Stage2Model {
            backbone: Backbone::new(bcfg, rng)?,
            transformer: CoreTransformer::new(tcfg, rng)?,
        })
    }

    fn rois_to_batch(core: &CoreSample, kept: Option<&[usize]>) -> Array4<f32> {
        let (_, h, w) = core.bag.rois.dim();
        match kept {
            None => {
                let n = core.bag.len();
                let mut x = Array4::zeros((n, 1, h, w));
                for i in 0..n {
                    x.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&core.bag.rois.index_axis(Axis(0), i));
                }
                x
            }
            Some(kept) => {
                let mut x = Array4::zeros((kept.len(), 1, h, w));
                for (k, &i) in kept.iter().enumerate() {
                    x.index_axis_mut(Axis(0), k)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&core.bag.rois.index_axis(Axis(0), i));
                }
                x
            }
        }
    }

    fn grid_rows(&self, core: &CoreSample, kept: Option<&[usize]>) -> Result<Vec<usize>> {
        let (max_ax, max_lat) = self.transformer.config.max_grid;
        let pick = |i: usize| -> Result<usize> {
            let (ia, il) = core.grid[i];
            if ia >= max_ax || il >= max_lat {
                return Err(Error::InvalidInput(format!(
                    "core {}: grid position ({ia}, {il}) outside positional table {max_ax}x{max_lat}",
                    core.core_id
                )));
            }
            Ok(ia * max_lat + il)
        };
        match kept {
            None => (0..core.bag.len()).map(pick).collect(),
            Some(kept) => kept.iter().map(|&i| pick(i)).collect(),
        }
    }

    /// Forward one core. `kept` selects the ROI subset (training dropout);
    /// evaluation passes `None` and sees the whole bag.
    pub fn forward_core(
        &self,
        core: &CoreSample,
        kept: Option<&[usize]>,
    ) -> Result<(ClassScores, Stage2Cache)> {
        if core.bag.is_empty() {
            return Err(Error::EmptyBag(format!("core {}", core.core_id)));
        }
        let x = Self::rois_to_batch(core, kept);
        let rows = self.grid_rows(core, kept)?;
        let (features, bb) = self.backbone.forward(&x);
        let (scores, tf) = self.transformer.forward(&features, &rows)?;
        Ok((scores, Stage2Cache { bb, tf }))
    }

    pub fn backward_core(&mut self, cache: &Stage2Cache, grad_logits: [f32; 2]) {
        let grad_features = self.transformer.backward(&cache.tf, grad_logits, None);
        self.backbone.backward(&cache.bb, &grad_features);
    }

    /// Evaluation-mode prediction over the full bag.
    pub fn predict(&self, core: &CoreSample) -> Result<ClassScores> {
        Ok(self.forward_core(core, None)?.0)
    }

    /// Mean-pooled representation ahead of the classifier.
    pub fn pooled_features(&self, core: &CoreSample) -> Result<Vec<f32>> {
        let (_, cache) = self.forward_core(core, None)?;
        Ok(cache.tf.pooled())
    }

    /// Per-ROI relevancy for one class over the full bag.
    pub fn relevance(
        &mut self,
        core: &CoreSample,
        class: CoreLabel,
        pooling: RelevancyPooling,
    ) -> Result<RelevancyVector> {
        let x = Self::rois_to_batch(core, None);
        let rows = self.grid_rows(core, None)?;
        let features = self.backbone.features(&x);
        roi_relevance_from_features(&mut self.transformer, &features, &rows, class, pooling)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.collect_params(out);
        self.transformer.collect_params(out);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.transformer.params());
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage2EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
}

pub struct Stage2Outcome {
    pub history: Vec<Stage2EpochRow>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub best: ParamSnapshot,
    /// Final optimizer state, serialized for resume.
    pub adam: Adam,
}

/// Resume point: first epoch to run plus restored optimizer state.
pub struct ResumeState {
    pub start_epoch: usize,
    pub adam: Adam,
}

/// Mean cancer probability AUROC of the model over a core set.
pub fn validation_auroc(model: &Stage2Model, set: &CoreSet) -> Result<f64> {
    let mut scores = Vec::with_capacity(set.len());
    for core in &set.cores {
        scores.push(f64::from(model.predict(core)?.cancer_probability()));
    }
    let labels = set.core_labels();
    Ok(compute_metrics(&scores, &labels, 0.5)?.auroc)
}

/// Cross-entropy finetuning on core labels. The best checkpoint is the one
/// with the highest validation AUROC, evaluated after each epoch, earliest
/// epoch on ties.
pub fn finetune(
    model: &mut Stage2Model,
    train: &CoreSet,
    val: &CoreSet,
    cfg: &Stage2Schedule,
    seed: u64,
    resume: Option<ResumeState>,
    mut epoch_sink: Option<&mut (dyn FnMut(usize, &Stage2Model, &Adam, &[Stage2EpochRow]) -> Result<()> + '_)>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("empty training or validation set".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.cores_per_batch) as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let sch_t = WarmupCosine::new(
        cfg.transformer_peak_lr as f32,
        cfg.transformer_warmup_epochs as u64 * steps_per_epoch,
        total_steps,
    );
    let sch_b = WarmupCosine::new(
        cfg.backbone_peak_lr as f32,
        cfg.backbone_warmup_epochs as u64 * steps_per_epoch,
        total_steps,
    );

    let (start_epoch, mut adam) = match resume {
        Some(r) => (r.start_epoch, r.adam),
        None => (0, Adam::default()),
    };
    let rate = model.transformer.config.roi_dropout_rate;
    let mut history: Vec<Stage2EpochRow> = Vec::new();
    let mut best: Option<(usize, f64, ParamSnapshot)> = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = stream(seed, &[tag("stage2-shuffle"), epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        let mut step = epoch as u64 * steps_per_epoch;
        for batch in order.chunks(cfg.cores_per_batch) {
            let lr_t = sch_t.lr(step);
            let lr_b = sch_b.lr(step);
            let mut batch_loss = 0.0f64;
            for &ci in batch {
                let core = &train.cores[ci];
                let mut drop_rng = stream(seed, &[tag("roi-drop"), epoch as u64, ci as u64]);
                let kept = roi_dropout(core.bag.len(), rate, &mut drop_rng);
                let (scores, cache) = model.forward_core(core, Some(&kept))?;
                let logits =
                    Array2::from_shape_vec((1, 2), scores.logits.to_vec()).unwrap();
                let (loss, grad) = rfmil_nn::loss::cross_entropy(&logits, &[core.label]);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss on core {} at epoch {epoch}",
                        core.core_id
                    )));
                }
                batch_loss += f64::from(loss);
                let scale = 1.0 / batch.len() as f32;
                model.backward_core(&cache, [grad[[0, 0]] * scale, grad[[0, 1]] * scale]);
            }
            epoch_loss += batch_loss / batch.len() as f64;
            n_batches += 1;

            let mut params = Vec::new();
            model.collect_params(&mut params);
            adam.step(&mut params, &|name| {
                if name.starts_with("backbone") {
                    lr_b
                } else {
                    lr_t
                }
            });
            for p in params {
                p.zero_grad();
            }
            step += 1;
        }

        let val_auroc = validation_auroc(model, val)?;
        let row = Stage2EpochRow {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_auroc,
            lr_transformer: f64::from(sch_t.lr(step.saturating_sub(1))),
            lr_backbone: f64::from(sch_b.lr(step.saturating_sub(1))),
        };
        history.push(row);

        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_auroc > *b,
        };
        if improved {
            let mut params = Vec::new();
            model.collect_params(&mut params);
            best = Some((epoch, val_auroc, ParamSnapshot::capture_mut(&params)));
        }
        if let Some(sink) = epoch_sink.as_deref_mut() {
            sink(epoch, model, &adam, &history)?;
        }
    }

    let (best_epoch, best_val_auroc, best) = best.ok_or_else(|| {
        Error::InvalidInput("resume start epoch is past the end of the schedule".into())
    })?;
    Ok(Stage2Outcome {
        history,
        best_epoch,
        best_val_auroc,
        best,
        adam,
    })
}

/// Write per-epoch finetune history (`epoch, train_loss, val_auroc, lr_t, lr_b`).
pub fn write_stage2_log(history: &[Stage2EpochRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["epoch", "train_loss", "val_auroc", "lr_transformer", "lr_backbone"])?;
    for r in history {
        wtr.write_record(&[
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_auroc.to_string(),
            r.lr_transformer.to_string(),
            r.lr_backbone.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Spec-facing composition: run one bag through backbone and aggregator.
pub fn forward_core(
    backbone: &Backbone,
    transformer: &CoreTransformer,
    bag: &crate::preprocess::RoiBag,
    spec: &RoiSpec,
) -> Result<(ClassScores, TransformerCache)> {
    if bag.is_empty() {
        return Err(Error::EmptyBag(format!("core {}", bag.core_id)));
    }
    let (n, h, w) = bag.rois.dim();
    let mut x = Array4::zeros((n, 1, h, w));
    for i in 0..n {
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&bag.rois.index_axis(Axis(0), i));
    }
    let features = backbone.features(&x);
    let rows = transformer.pos_rows(&bag.positions, spec)?;
    transformer.forward(&features, &rows)
}
