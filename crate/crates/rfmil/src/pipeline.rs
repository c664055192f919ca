//! End-to-end orchestration: data preparation, stage-1 pretraining,
//! stage-2 finetuning, baselines, and evaluation, all driven by one
//! [`RunConfig`]. The command-line binary and the integration tests both go
//! through these entry points.

use crate::backbone::{Backbone, Projector};
use crate::baselines::{train_baseline, BaselineBudget, BaselineKind, BaselineOutcome, RoiOrMil};
use crate::checkpoint::ParamSnapshot;
use crate::config::RunConfig;
use crate::dataset::{load_coreset, CoreSet};
use crate::error::Result;
use crate::eval::{compute_metrics, make_splits, select_cores, MetricsReport};
use crate::ssl::{train_ssl, SslOutcome};
use crate::stage2::{finetune, Stage2Model, Stage2Outcome, ResumeState, validation_auroc};
use crate::synth::{self, ManifestRow};
use rfmil_nn::rng::{stream, tag};
use std::path::Path;

pub struct PreparedData {
    pub train: CoreSet,
    pub val: CoreSet,
    pub test: CoreSet,
}

/// Apply the selection policy and patient-exclusive splits to a manifest,
/// then load the three core sets (building bags as needed).
pub fn prepare_data(data_dir: impl AsRef<Path>, config: &RunConfig) -> Result<PreparedData> {
    let data_dir = data_dir.as_ref();
    let manifest = synth::read_manifest(data_dir.join("manifest.csv"))?;
    prepare_data_from_manifest(data_dir, &manifest, config)
}

pub fn prepare_data_from_manifest(
    data_dir: impl AsRef<Path>,
    manifest: &[ManifestRow],
    config: &RunConfig,
) -> Result<PreparedData> {
    let mut rng = stream(config.seed, &[tag("select")]);
    let selected = select_cores(manifest, &config.selection, &mut rng)?;
    let splits = make_splits(&selected, &config.split, config.seed)?;
    let load = |rows: &[ManifestRow]| load_coreset(data_dir.as_ref(), rows, &config.roi, true);
    Ok(PreparedData {
        train: load(&splits.train)?,
        val: load(&splits.val)?,
        test: load(&splits.test)?,
    })
}

/// Stage 1. Returns the backbone/projector at their best online-eval state.
pub fn run_stage1(
    config: &RunConfig,
    data: &PreparedData,
    sink: Option<&mut crate::ssl::EpochSink>,
) -> Result<(Backbone, Projector, SslOutcome)> {
    let mut rng = stream(config.seed, &[tag("init"), tag("stage1")]);
    let mut backbone = Backbone::new(&config.backbone, &mut rng)?;
    let mut projector = Projector::new(&config.projector, config.backbone.feature_dim, &mut rng)?;
    let outcome = train_ssl(
        &mut backbone,
        &mut projector,
        &data.train,
        &data.val,
        &config.ssl,
        &config.augment,
        &config.vicreg,
        config.seed,
        sink,
    )?;
    {
        let mut params = Vec::new();
        backbone.collect_params(&mut params);
        projector.collect_params(&mut params);
        outcome.best.restore(&mut params)?;
    }
    Ok((backbone, projector, outcome))
}

/// Stage 2 from a stage-1 parameter snapshot. Returns the model at its best
/// validation state.
pub fn run_stage2(
    config: &RunConfig,
    data: &PreparedData,
    stage1_params: &ParamSnapshot,
    resume: Option<ResumeState>,
    sink: Option<&mut (dyn FnMut(usize, &Stage2Model, &rfmil_nn::Adam, &[crate::stage2::Stage2EpochRow]) -> Result<()> + '_)>,
) -> Result<(Stage2Model, Stage2Outcome)> {
    let mut rng = stream(config.seed, &[tag("init"), tag("stage2")]);
    let mut model = Stage2Model::new(&config.backbone, &config.transformer, &mut rng)?;
    {
        // stage-1 snapshot covers backbone (+ projector, which stage 2
        // does not use); restore the backbone part
        let mut params = Vec::new();
        model.backbone.collect_params(&mut params);
        stage1_params.restore(&mut params)?;
    }
    let outcome = finetune(
        &mut model,
        &data.train,
        &data.val,
        &config.stage2,
        config.seed,
        resume,
        sink,
    )?;
    {
        let mut params = Vec::new();
        model.collect_params(&mut params);
        outcome.best.restore(&mut params)?;
    }
    Ok((model, outcome))
}

/// Budget for the comparison methods: the same per-epoch caps as stage 1
/// and as many epochs as both stages combined, so every method sees a
/// comparable number of optimization passes.
pub fn matched_baseline_budget(config: &RunConfig) -> BaselineBudget {
    BaselineBudget {
        epochs: config.ssl.epochs + config.stage2.epochs,
        batch_size: config.ssl.batch_size,
        peak_lr: config.ssl.peak_lr,
        warmup_epochs: config.ssl.warmup_epochs,
        max_batches_per_epoch: config.ssl.max_batches_per_epoch,
        cores_per_batch: config.stage2.cores_per_batch,
    }
}

pub fn run_baseline(
    config: &RunConfig,
    data: &PreparedData,
    kind: BaselineKind,
    stage1: Option<&ParamSnapshot>,
) -> Result<(BaselineOutcome, RoiOrMil)> {
    let budget = matched_baseline_budget(config);
    let (outcome, mut model) = train_baseline(
        kind,
        &config.backbone,
        &config.mil,
        &data.train,
        &data.val,
        &budget,
        stage1,
        config.seed,
    )?;
    // leave the model at its best validation state
    match &mut model {
        RoiOrMil::Roi(m) => {
            let mut params = Vec::new();
            m.collect_params(&mut params);
            outcome.best.restore(&mut params)?;
        }
        RoiOrMil::Mil(m) => {
            let mut params = Vec::new();
            m.collect_params(&mut params);
            outcome.best.restore(&mut params)?;
        }
    }
    Ok((outcome, model))
}

/// Test-set metrics of a stage-2 model at the given threshold.
pub fn evaluate_stage2(model: &Stage2Model, set: &CoreSet, threshold: f64) -> Result<MetricsReport> {
    let mut scores = Vec::with_capacity(set.len());
    for core in &set.cores {
        scores.push(f64::from(model.predict(core)?.cancer_probability()));
    }
    compute_metrics(&scores, &set.core_labels(), threshold)
}

/// Test-set metrics of a baseline model at the given threshold.
pub fn evaluate_baseline(model: &RoiOrMil, set: &CoreSet, threshold: f64) -> Result<MetricsReport> {
    let mut scores = Vec::with_capacity(set.len());
    for core in &set.cores {
        scores.push(model.core_score(&core.bag.rois)?);
    }
    compute_metrics(&scores, &set.core_labels(), threshold)
}

/// One full two-stage run on prepared data; convenience for multi-seed
/// protocols.
pub fn run_two_stage(
    config: &RunConfig,
    data: &PreparedData,
    threshold: f64,
) -> Result<(MetricsReport, Stage2Model, SslOutcome, Stage2Outcome)> {
    let (backbone, projector, ssl_out) = run_stage1(config, data, None)?;
    let mut snap_params = backbone.params();
    snap_params.extend(projector.params());
    let snapshot = ParamSnapshot::capture(&snap_params);
    let (model, s2_out) = run_stage2(config, data, &snapshot, None, None)?;
    let report = evaluate_stage2(&model, &data.test, threshold)?;
    let _ = validation_auroc(&model, &data.val)?;
    Ok((report, model, ssl_out, s2_out))
}
