//! Command-line entry points for the pipeline. All substance lives in the
//! `rfmil` library; this binary parses arguments, resolves the run
//! configuration (flags > file > defaults), and wires artifacts to disk.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rfmil::baselines::BaselineKind;
use rfmil::checkpoint;
use rfmil::config::RunConfig;
use rfmil::dataset::CoreSet;
use rfmil::eval::{self, MetricsReport, MultiRunSummary};
use rfmil::stage2::ResumeState;
use rfmil::synth::CoreLabel;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rfmil", version, about = "RF-ultrasound core classification pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value (repeatable), e.g. --set ssl.epochs=2
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset plus manifest.csv.
    Synth {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Build and persist ROI bags for every core in the manifest.
    Preprocess {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Stage 1: self-supervised backbone pretraining with online eval.
    Pretrain {
        #[arg(long)]
        data_dir: PathBuf,
        /// Run directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: end-to-end finetuning from a stage-1 checkpoint.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue a stage-2 run from one of its epoch checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated comparison methods to train alongside
        /// (supervised_roi, ssl_linear, ssl_finetune, attention_mil,
        /// gated_attention_mil).
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<String>,
    },
    /// Score one or more checkpoints on a split; emits one metrics record
    /// per checkpoint plus a mean±std summary table.
    Evaluate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Decision threshold on the cancer probability for sens/spec.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relevancy maps for one core: CSV plus heatmap PNGs.
    Explain {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        core_id: String,
        /// benign or cancer; both when omitted.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled pre-classifier features per core, as CSV.
    ExportFeatures {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    let config = base.apply_overrides(&cli.set)?;
    config.validate()?;

    match cli.command {
        Command::Synth { data_dir } => cmd_synth(&config, &data_dir),
        Command::Preprocess { data_dir } => cmd_preprocess(&config, &data_dir),
        Command::Pretrain { data_dir, out } => cmd_pretrain(&config, &data_dir, out),
        Command::Train {
            data_dir,
            stage1,
            out,
            resume,
            baselines,
        } => cmd_train(&config, &data_dir, &stage1, out, resume, &baselines),
        Command::Evaluate {
            data_dir,
            checkpoints,
            split,
            threshold,
            out,
        } => cmd_evaluate(&config, &data_dir, &checkpoints, split, threshold, out),
        Command::Explain {
            data_dir,
            checkpoint,
            core_id,
            class,
            out,
        } => cmd_explain(&config, &data_dir, &checkpoint, &core_id, class.as_deref(), out),
        Command::ExportFeatures {
            data_dir,
            checkpoint,
            split,
            out,
        } => cmd_export_features(&config, &data_dir, &checkpoint, split, &out),
    }
}

fn run_dir(config: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from(&config.out_dir));
    std::fs::create_dir_all(&dir)?;
    config.write_file(dir.join("config.toml"))?;
    Ok(dir)
}

fn cmd_synth(config: &RunConfig, data_dir: &Path) -> Result<()> {
    let t = Instant::now();
    let manifest = rfmil::synth::generate_dataset(
        data_dir,
        &config.dataset,
        &config.phantom,
        &config.roi,
        config.seed,
    )?;
    let cancer = manifest.iter().filter(|r| r.label == CoreLabel::Cancer).count();
    println!(
        "wrote {} cores ({} cancer) to {} in {:.1}s [config {}]",
        manifest.len(),
        cancer,
        data_dir.display(),
        t.elapsed().as_secs_f64(),
        config.full_hash(),
    );
    Ok(())
}

fn cmd_preprocess(config: &RunConfig, data_dir: &Path) -> Result<()> {
    let t = Instant::now();
    let manifest = rfmil::synth::read_manifest(data_dir.join("manifest.csv"))?;
    let rois = rfmil::dataset::preprocess_manifest(data_dir, &manifest, &config.roi)?;
    println!(
        "built {} bags ({} ROIs total) in {:.1}s",
        manifest.len(),
        rois,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_pretrain(config: &RunConfig, data_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let t = Instant::now();
    let dir = run_dir(config, out)?;
    let ckpt_dir = dir.join("checkpoints/stage1");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(dir.join("logs"))?;

    let data = rfmil::pipeline::prepare_data(data_dir, config)?;
    log::info!(
        "prepared {} train / {} val / {} test cores",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let mut sink = |epoch: usize,
                    bb: &rfmil::backbone::Backbone,
                    proj: &rfmil::backbone::Projector,
                    history: &[(usize, f64)]|
     -> rfmil::Result<()> {
        checkpoint::save_stage1(
            ckpt_dir.join(format!("epoch_{epoch:04}.rfbc")),
            bb,
            proj,
            None,
            epoch,
            history,
            config,
        )
    };
    let (backbone, projector, outcome) =
        rfmil::pipeline::run_stage1(config, &data, Some(&mut sink))?;

    rfmil::ssl::write_ssl_log(&outcome.log, dir.join("logs/stage1.csv"))?;
    checkpoint::save_stage1(
        ckpt_dir.join("best.rfbc"),
        &backbone,
        &projector,
        None,
        outcome.best_epoch,
        &outcome.eval_history,
        config,
    )?;
    println!(
        "stage 1 done in {:.1}s: best epoch {} (probe AUROC {:.4}); checkpoint at {}",
        t.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_auroc,
        ckpt_dir.join("best.rfbc").display()
    );
    Ok(())
}

fn cmd_train(
    config: &RunConfig,
    data_dir: &Path,
    stage1: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    baselines: &[String],
) -> Result<()> {
    let t = Instant::now();
    let dir = run_dir(config, out)?;
    let ckpt_dir = dir.join("checkpoints/stage2");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(dir.join("logs"))?;

    let data = rfmil::pipeline::prepare_data(data_dir, config)?;
    let (s1_backbone, s1_projector, _) = checkpoint::load_stage1(stage1, config)?;
    let mut s1_params = s1_backbone.params();
    s1_params.extend(s1_projector.params());
    let s1_snapshot = rfmil::checkpoint::ParamSnapshot::capture(&s1_params);

    let outcome;
    let model;
    {
        let mut sink = |epoch: usize,
                        m: &rfmil::stage2::Stage2Model,
                        adam: &rfmil::nn::Adam,
                        history: &[rfmil::stage2::Stage2EpochRow]|
         -> rfmil::Result<()> {
            checkpoint::save_stage2(
                ckpt_dir.join(format!("epoch_{epoch:04}.rfbc")),
                m,
                Some(adam),
                epoch,
                history,
                config,
            )
        };
        match resume {
            None => {
                let (m, o) =
                    rfmil::pipeline::run_stage2(config, &data, &s1_snapshot, None, Some(&mut sink))?;
                model = m;
                outcome = o;
            }
            Some(resume_path) => {
                let (mut m, loaded) = checkpoint::load_stage2(&resume_path, config)?;
                let adam = loaded.adam.ok_or_else(|| {
                    anyhow::anyhow!(
                        "{} has no optimizer state; cannot resume",
                        resume_path.display()
                    )
                })?;
                let o = rfmil::stage2::finetune(
                    &mut m,
                    &data.train,
                    &data.val,
                    &config.stage2,
                    config.seed,
                    Some(ResumeState {
                        start_epoch: loaded.meta.epoch + 1,
                        adam,
                    }),
                    Some(&mut sink),
                )?;
                let mut params = Vec::new();
                m.collect_params(&mut params);
                o.best.restore(&mut params)?;
                model = m;
                outcome = o;
            }
        }
    }

    rfmil::stage2::write_stage2_log(&outcome.history, dir.join("logs/stage2.csv"))?;
    checkpoint::save_stage2(
        ckpt_dir.join("best.rfbc"),
        &model,
        Some(&outcome.adam),
        outcome.best_epoch,
        &outcome.history,
        config,
    )?;
    println!(
        "stage 2 done in {:.1}s: best epoch {} (val AUROC {:.4}); checkpoint at {}",
        t.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_auroc,
        ckpt_dir.join("best.rfbc").display()
    );

    for kind_str in baselines {
        let kind = BaselineKind::from_str(kind_str)?;
        let bt = Instant::now();
        let (b_out, b_model) =
            rfmil::pipeline::run_baseline(config, &data, kind, Some(&s1_snapshot))?;
        let b_dir = dir.join("checkpoints/baselines");
        std::fs::create_dir_all(&b_dir)?;
        checkpoint::save_baseline(
            b_dir.join(format!("{kind}.rfbc")),
            kind,
            &b_model,
            b_out.best_epoch,
            config,
        )?;
        let mut wtr = csv::Writer::from_path(dir.join(format!("logs/baseline_{kind}.csv")))?;
        wtr.write_record(["epoch", "train_loss", "val_auroc"])?;
        for r in &b_out.history {
            wtr.write_record(&[
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_auroc.to_string(),
            ])?;
        }
        wtr.flush()?;
        println!(
            "baseline {kind} done in {:.1}s: best val AUROC {:.4}",
            bt.elapsed().as_secs_f64(),
            b_out.best_val_auroc
        );
    }
    Ok(())
}

fn pick_split(config: &RunConfig, data_dir: &Path, split: SplitName) -> Result<CoreSet> {
    let data = rfmil::pipeline::prepare_data(data_dir, config)?;
    let set = match split {
        SplitName::Train => data.train,
        SplitName::Val => data.val,
        SplitName::Test => data.test,
    };
    if set.is_empty() {
        bail!("split {split:?} is empty for this dataset and config");
    }
    Ok(set)
}

fn cmd_evaluate(
    config: &RunConfig,
    data_dir: &Path,
    checkpoints: &[PathBuf],
    split: SplitName,
    threshold: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = run_dir(config, out)?;
    let metrics_dir = dir.join("metrics");
    std::fs::create_dir_all(&metrics_dir)?;
    let set = pick_split(config, data_dir, split)?;

    let mut records: Vec<(String, String, MetricsReport)> = Vec::new();
    for path in checkpoints {
        let loaded = checkpoint::load_checkpoint(path)?;
        let (kind, report) = if loaded.meta.kind == "stage2" {
            let (model, _) = checkpoint::load_stage2(path, config)?;
            (
                "stage2".to_string(),
                rfmil::pipeline::evaluate_stage2(&model, &set, threshold)?,
            )
        } else if loaded.meta.kind.starts_with("baseline_") {
            let (model, kind, _) = checkpoint::load_baseline(path, config)?;
            (
                kind.to_string(),
                rfmil::pipeline::evaluate_baseline(&model, &set, threshold)?,
            )
        } else {
            bail!("cannot evaluate a '{}' checkpoint", loaded.meta.kind);
        };
        records.push((path.display().to_string(), kind, report));
    }

    let jsonl_path = metrics_dir.join("metrics.jsonl");
    let mut lines = String::new();
    for (path, kind, r) in &records {
        let obj = serde_json::json!({
            "checkpoint": path,
            "method": kind,
            "split": format!("{split:?}").to_lowercase(),
            "auroc": r.auroc,
            "average_precision": r.average_precision,
            "sensitivity": r.sensitivity,
            "specificity": r.specificity,
            "threshold": r.threshold,
            "n_cores": r.n_cores,
            "config_full_hash": config.full_hash(),
            "format_version": 1,
        });
        lines.push_str(&obj.to_string());
        lines.push('\n');
    }
    std::fs::write(&jsonl_path, lines)?;

    let mut by_method: std::collections::BTreeMap<String, Vec<MetricsReport>> = Default::default();
    for (_, kind, r) in &records {
        by_method.entry(kind.clone()).or_default().push(*r);
    }
    let mut table_rows: Vec<(String, MultiRunSummary)> = Vec::new();
    for (method, runs) in &by_method {
        let summary = if runs.len() >= 2 {
            eval::multi_run_summary(runs)?
        } else {
            MultiRunSummary {
                n_runs: 1,
                auroc: (runs[0].auroc, 0.0),
                average_precision: (runs[0].average_precision, 0.0),
                sensitivity: (runs[0].sensitivity, 0.0),
                specificity: (runs[0].specificity, 0.0),
            }
        };
        table_rows.push((method.clone(), summary));
    }
    let table = eval::format_summary_table(&table_rows);
    std::fs::write(metrics_dir.join("summary.txt"), &table)?;
    print!("{table}");
    println!("wrote {} record(s) to {}", records.len(), jsonl_path.display());
    Ok(())
}

fn cmd_explain(
    config: &RunConfig,
    data_dir: &Path,
    ckpt: &Path,
    core_id: &str,
    class: Option<&str>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = run_dir(config, out)?;
    let (mut model, _) = checkpoint::load_stage2(ckpt, config)?;
    let manifest = rfmil::synth::read_manifest(data_dir.join("manifest.csv"))?;
    let row = manifest
        .iter()
        .find(|r| r.core_id == core_id)
        .with_context(|| format!("core '{core_id}' not in manifest"))?;
    let set = rfmil::dataset::load_coreset(data_dir, std::slice::from_ref(row), &config.roi, true)?;
    let core = &set.cores[0];
    let image = rfmil::preprocess::read_image(data_dir.join(&row.image_path))?;

    let classes: Vec<CoreLabel> = match class {
        None => vec![CoreLabel::Benign, CoreLabel::Cancer],
        Some(c) => vec![CoreLabel::from_str(c)?],
    };
    let explain_dir = dir.join("explain").join(core_id);
    std::fs::create_dir_all(&explain_dir)?;

    let mut per_class = std::collections::BTreeMap::new();
    for cls in &classes {
        let rel = model.relevance(core, *cls, rfmil::relevancy::RelevancyPooling::default())?;
        let heat = rfmil::relevancy::map_to_image(
            &rel,
            &core.bag.positions,
            image.samples.dim(),
            (image.depth_mm, image.width_mm),
            config.roi.roi_size_mm,
        )?;
        let png = explain_dir.join(format!("heatmap_{cls}.png"));
        rfmil::relevancy::write_heatmap_png(&heat, &png)?;
        println!("wrote {}", png.display());
        per_class.insert(format!("{cls}"), rel);
    }
    // the CSV carries both class columns; a single-class request reuses
    // that class's scores for both
    let benign = per_class
        .get("benign")
        .or_else(|| per_class.get("cancer"))
        .unwrap()
        .clone();
    let cancer = per_class
        .get("cancer")
        .or_else(|| per_class.get("benign"))
        .unwrap()
        .clone();
    let csv_path = explain_dir.join("relevance.csv");
    rfmil::relevancy::write_relevance_csv(&benign, &cancer, &core.bag.positions, &csv_path)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_export_features(
    config: &RunConfig,
    data_dir: &Path,
    ckpt: &Path,
    split: SplitName,
    out: &Path,
) -> Result<()> {
    let (model, _) = checkpoint::load_stage2(ckpt, config)?;
    let set = pick_split(config, data_dir, split)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut wtr = csv::Writer::from_path(out)?;
    let dim = config.transformer.dim;
    let mut header = vec![
        "core_id".to_string(),
        "label".to_string(),
        "gleason_surrogate".to_string(),
    ];
    header.extend((0..dim).map(|i| format!("f{i:03}")));
    wtr.write_record(&header)?;
    for core in &set.cores {
        let pooled = model.pooled_features(core)?;
        let mut rec = vec![
            core.core_id.clone(),
            if core.label == 1 { "cancer".into() } else { "benign".into() },
            core.gleason_surrogate.to_string(),
        ];
        rec.extend(pooled.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    println!("wrote {} rows to {}", set.len(), out.display());
    Ok(())
}
