//! Stage 1: self-supervised pretraining of the backbone on unlabeled ROIs.
//!
//! Batches draw ROIs across cores, each ROI yields two augmented views, and
//! the paired projection batches feed the variance-invariance-covariance
//! loss. A linear probe on frozen features runs at a fixed cadence and its
//! validation AUROC selects the best checkpoint (ties go to the earliest
//! epoch).
//!
//! RNG streams key on `(seed, purpose, epoch, sample)`, so results do not
//! depend on worker count. Forward caches are held for one full batch;
//! memory scales with `batch_size` times the ROI resolution.

use crate::augment::{augment, AugmentationPolicy};
use crate::backbone::{Backbone, Projector};
use crate::checkpoint::ParamSnapshot;
use crate::dataset::CoreSet;
use crate::error::{Error, Result};
use crate::probe::online_linear_eval;
use crate::vicreg::{vicreg_loss_grad, VicregWeights};
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rfmil_nn::rng::{stream, tag};
use rfmil_nn::{Adam, WarmupCosine};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SslSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    /// Run the linear probe every this many epochs (and on the last).
    pub eval_cadence: usize,
    /// 0 means iterate the full ROI pool each epoch.
    pub max_batches_per_epoch: usize,
    /// Cap on probe feature extraction per split.
    pub probe_max_samples: usize,
}

impl Default for SslSchedule {
    fn default() -> Self {
        SslSchedule {
            epochs: 200,
            batch_size: 64,
            warmup_epochs: 10,
            peak_lr: 1e-4,
            eval_cadence: 5,
            max_batches_per_epoch: 0,
            probe_max_samples: 2048,
        }
    }
}

impl SslSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("ssl epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidInput(format!(
                "warmup {} must be shorter than the run {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One training-log line: `step, lr, total, s, v, c`.
#[derive(Debug, Clone, Serialize)]
pub struct SslLogRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub s: f64,
    pub v: f64,
    pub c: f64,
}

pub struct SslOutcome {
    /// (epoch, probe AUROC) in evaluation order.
    pub eval_history: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_auroc: f64,
    pub best: ParamSnapshot,
    pub log: Vec<SslLogRow>,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Per-epoch observer; the CLI persists checkpoints from here.
pub type EpochSink<'a> = dyn FnMut(usize, &Backbone, &Projector, &[(usize, f64)]) -> Result<()> + 'a;

fn batch_views(
    train: &CoreSet,
    pool: &[(usize, usize)],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: usize,
    batch_start: usize,
) -> (Array4<f32>, Array4<f32>) {
    let b = pool.len();
    let (h, w) = {
        let roi = train.cores[pool[0].0].bag.rois.index_axis(Axis(0), pool[0].1);
        roi.dim()
    };
    let mut va = Array4::zeros((b, 1, h, w));
    let mut vb = Array4::zeros((b, 1, h, w));
    for (k, &(ci, ri)) in pool.iter().enumerate() {
        let roi = train.cores[ci].bag.rois.index_axis(Axis(0), ri).to_owned();
        let mut rng = stream(seed, &[tag("augment"), epoch as u64, (batch_start + k) as u64]);
        let (a, b2) = augment(&roi, policy, &mut rng);
        va.index_axis_mut(Axis(0), k)
            .index_axis_mut(Axis(0), 0)
            .assign(&a);
        vb.index_axis_mut(Axis(0), k)
            .index_axis_mut(Axis(0), 0)
            .assign(&b2);
    }
    (va, vb)
}

/// Deterministic sub-sample of the ROI pool for probe features.
fn probe_pool(set: &CoreSet, cap: usize) -> Vec<(usize, usize)> {
    let pool = set.roi_pool();
    if cap == 0 || pool.len() <= cap {
        return pool;
    }
    let stride = pool.len() as f64 / cap as f64;
    (0..cap)
        .map(|k| pool[(k as f64 * stride) as usize])
        .collect()
}

/// Frozen-feature extraction in chunks.
pub fn extract_features(
    backbone: &Backbone,
    set: &CoreSet,
    pool: &[(usize, usize)],
) -> (Array2<f32>, Vec<bool>) {
    let (h, w) = {
        let roi = set.cores[pool[0].0].bag.rois.index_axis(Axis(0), pool[0].1);
        roi.dim()
    };
    let d = backbone.config.feature_dim;
    let mut features = Array2::zeros((pool.len(), d));
    let mut labels = Vec::with_capacity(pool.len());
    for (chunk_idx, chunk) in pool.chunks(256).enumerate() {
        let mut x = Array4::zeros((chunk.len(), 1, h, w));
        for (k, &(ci, ri)) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), k)
                .index_axis_mut(Axis(0), 0)
                .assign(&set.cores[ci].bag.rois.index_axis(Axis(0), ri));
        }
        let f = backbone.features(&x);
        for (k, &(ci, _)) in chunk.iter().enumerate() {
            features
                .row_mut(chunk_idx * 256 + k)
                .assign(&f.row(k));
            labels.push(set.cores[ci].label == 1);
        }
    }
    (features, labels)
}

/// Probe AUROC of the current backbone on weak ROI labels.
pub fn run_online_eval(
    backbone: &Backbone,
    train: &CoreSet,
    val: &CoreSet,
    cap: usize,
) -> Result<f64> {
    let train_pool = probe_pool(train, cap);
    let val_pool = probe_pool(val, cap);
    let (tf, tl) = extract_features(backbone, train, &train_pool);
    let (vf, vl) = extract_features(backbone, val, &val_pool);
    online_linear_eval(&tf, &tl, &vf, &vl)
}

pub fn train_ssl(
    backbone: &mut Backbone,
    projector: &mut Projector,
    train: &CoreSet,
    val: &CoreSet,
    cfg: &SslSchedule,
    policy: &AugmentationPolicy,
    weights: &VicregWeights,
    seed: u64,
    sink: Option<&mut EpochSink>,
) -> Result<SslOutcome> {
    cfg.validate()?;
    policy.validate()?;
    weights.validate()?;
    if train.cores.is_empty() || val.cores.is_empty() {
        return Err(Error::InvalidInput("empty training or validation set".into()));
    }
    let full_pool = train.roi_pool();
    if full_pool.len() < cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "ROI pool of {} smaller than one batch of {}",
            full_pool.len(),
            cfg.batch_size
        )));
    }
    let batches_per_epoch = {
        let full = full_pool.len() / cfg.batch_size;
        if cfg.max_batches_per_epoch > 0 {
            full.min(cfg.max_batches_per_epoch).max(1)
        } else {
            full.max(1)
        }
    };
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let schedule = WarmupCosine::new(
        cfg.peak_lr as f32,
        (cfg.warmup_epochs * batches_per_epoch) as u64,
        total_steps,
    );
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let mut eval_history: Vec<(usize, f64)> = Vec::new();
    let mut best: Option<(usize, f64, ParamSnapshot)> = None;
    let mut step = 0u64;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut sink = sink;

    for epoch in 0..cfg.epochs {
        let mut pool = full_pool.clone();
        let mut shuffle_rng = stream(seed, &[tag("ssl-shuffle"), epoch as u64]);
        pool.shuffle(&mut shuffle_rng);

        for bi in 0..batches_per_epoch {
            let batch = &pool[bi * cfg.batch_size..(bi + 1) * cfg.batch_size];
            let (xa, xb) = batch_views(train, batch, policy, seed, epoch, bi * cfg.batch_size);

            let (fa, cache_a) = backbone.forward(&xa);
            let (fb, cache_b) = backbone.forward(&xb);
            let (za, pcache_a) = projector.forward(&fa);
            let (zb, pcache_b) = projector.forward(&fb);

            let za64 = za.mapv(f64::from);
            let zb64 = zb.mapv(f64::from);
            let (terms, gza, gzb) = vicreg_loss_grad(&za64, &zb64, weights)?;
            if !terms.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {step} (epoch {epoch}): {terms:?}"
                )));
            }
            if step == 0 {
                first_loss = terms.total;
            }
            last_loss = terms.total;

            let gza32 = gza.mapv(|v| v as f32);
            let gzb32 = gzb.mapv(|v| v as f32);
            let gfa = projector.backward(&pcache_a, &gza32);
            let gfb = projector.backward(&pcache_b, &gzb32);
            backbone.backward(&cache_a, &gfa);
            backbone.backward(&cache_b, &gfb);

            let lr = schedule.lr(step);
            log.push(SslLogRow {
                step,
                lr: f64::from(lr),
                total: terms.total,
                s: terms.invariance,
                v: terms.variance,
                c: terms.covariance,
            });
            let mut params = Vec::new();
            backbone.collect_params(&mut params);
            projector.collect_params(&mut params);
            adam.step(&mut params, &|_| lr);
            for p in params {
                p.zero_grad();
            }
            step += 1;
        }

        let is_eval_epoch =
            cfg.eval_cadence > 0 && (epoch % cfg.eval_cadence == 0 || epoch + 1 == cfg.epochs);
        if is_eval_epoch {
            let auroc = run_online_eval(backbone, train, val, cfg.probe_max_samples)?;
            eval_history.push((epoch, auroc));
            let improved = match &best {
                None => true,
                Some((_, b, _)) => auroc > *b,
            };
            if improved {
                let mut params = Vec::new();
                backbone.collect_params(&mut params);
                projector.collect_params(&mut params);
                best = Some((epoch, auroc, ParamSnapshot::capture_mut(&params)));
            }
        }
        if let Some(s) = sink.as_deref_mut() {
            s(epoch, backbone, projector, &eval_history)?;
        }
    }

    let (best_epoch, best_auroc, best) = best.expect("at least one eval ran");
    Ok(SslOutcome {
        eval_history,
        best_epoch,
        best_auroc,
        best,
        log,
        first_loss,
        last_loss,
    })
}

/// Write the training log with its documented header.
pub fn write_ssl_log(log: &[SslLogRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["step", "lr", "total", "s", "v", "c"])?;
    for row in log {
        wtr.write_record(&[
            row.step.to_string(),
            row.lr.to_string(),
            row.total.to_string(),
            row.s.to_string(),
            row.v.to_string(),
            row.c.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
