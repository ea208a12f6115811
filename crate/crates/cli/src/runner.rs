//! Executes experiment configs stage by stage: builds the data, chains
//! checkpoints between stages, skips work that a previous run already
//! finished, and leaves a self-describing record next to the outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use detlab_core::dataset::ImageSample;
use detlab_core::error::{Error, Result};
use detlab_core::eval::MetricReport;
use detlab_core::loss::KDConfig;
use detlab_core::model::{AnchorConfig, HeadKind, Model, ModelSpec, ScaleKind};
use detlab_core::train::{
    evaluate, save_history, train_crosstask_kd, train_multitask, train_multitask_selftrain,
    train_segmentation, train_self, train_supervised, train_teacher, TrainConfig, TrainResult,
};

use crate::config::{ExperimentConfig, StageConfig};
use crate::data::{materialize, Workbench};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub label: String,
    pub op: String,
    pub train_split: String,
    pub config_hash: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_map: f64,
    pub val_ap50: f64,
    pub val_seg_iou: Option<f64>,
    pub report: Option<MetricReport>,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub source_rev: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub total_wall_time_s: f64,
}

#[derive(Debug)]
pub struct MatrixEntry {
    pub name: String,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunRecord, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn source_rev() -> String {
    if let Ok(rev) = std::env::var("DETLAB_SOURCE_REV") {
        return rev;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Model spec a stage trains, chosen by its op.
fn stage_spec(op: &str, scale: ScaleKind) -> ModelSpec {
    match op {
        "teacher" => ModelSpec::teacher(scale),
        "segmentation" => {
            let mut spec = ModelSpec::teacher(scale);
            spec.heads = vec![HeadKind::Seg];
            spec
        }
        "multitask" | "multitask_selftrain" => ModelSpec::student(scale),
        _ => {
            let mut spec = ModelSpec::student(scale);
            spec.heads = vec![HeadKind::Det];
            spec
        }
    }
}

fn train_config(cfg: &ExperimentConfig, stage: &StageConfig) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(stage.mode()?);
    tc.epochs = stage.epochs;
    tc.early_stop_patience = match stage.patience {
        Some(p) => p,
        None => 10.min(stage.epochs.saturating_sub(1)).max(1),
    };
    tc.batch_size = stage.batch_size;
    tc.optimizer.lr = stage.lr;
    tc.optimizer.momentum = stage.momentum;
    tc.optimizer.weight_decay = stage.weight_decay;
    tc.optimizer.schedule = stage.schedule_kind()?;
    tc.seed = cfg.seed;
    tc.kd = KDConfig {
        method: stage.kd_method()?,
        weight: stage.kd_weight,
        ..KDConfig::default()
    };
    Ok(tc)
}

fn stage_dir(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(stage)
}

fn load_stage_model(run_dir: &Path, stage: &str, wanted_by: &str) -> Result<Model<f32>> {
    let path = stage_dir(run_dir, stage).join("checkpoint.ckpt");
    if !path.exists() {
        return Err(Error::Data(format!(
            "stage {wanted_by}: checkpoint for stage `{stage}` not found at {}; run that stage \
             first",
            path.display()
        )));
    }
    Model::load(&path)
}

/// Loads a finished stage record if its hash matches and outputs still exist.
fn finished(run_dir: &Path, stage: &StageConfig, hash: &str) -> Option<StageRecord> {
    let dir = stage_dir(run_dir, &stage.name);
    let text = std::fs::read_to_string(dir.join("stage.json")).ok()?;
    let rec: StageRecord = serde_json::from_str(&text).ok()?;
    let complete = rec.config_hash == hash
        && run_dir.join(&rec.checkpoint).exists()
        && run_dir.join(&rec.history).exists();
    complete.then_some(rec)
}

fn single_task_views(
    op: &str,
    train: Vec<ImageSample>,
    seg: Option<Vec<ImageSample>>,
) -> (Vec<ImageSample>, Option<Vec<ImageSample>>) {
    match op {
        "segmentation" => (
            train.iter().map(ImageSample::segmentation_only).collect(),
            seg,
        ),
        "multitask" | "multitask_selftrain" => (
            train.iter().map(ImageSample::detection_only).collect(),
            seg.map(|s| s.iter().map(ImageSample::segmentation_only).collect()),
        ),
        _ => (train, seg),
    }
}

fn execute_stage(
    cfg: &ExperimentConfig,
    bench: &Workbench,
    stage: &StageConfig,
    run_dir: &Path,
    hash: &str,
) -> Result<StageRecord> {
    let start = Instant::now();
    let scale = cfg.scale_kind()?;
    let anchors = AnchorConfig::for_scale(scale);
    let spec = stage_spec(&stage.op, scale);
    let mut tc = train_config(cfg, stage)?;
    if let Some(pre) = &stage.pretrain {
        tc.pretrain_from = Some(stage_dir(run_dir, pre).join("checkpoint.ckpt"));
    }

    let train = bench.select(&stage.train)?;
    let seg = stage.seg.as_deref().map(|s| bench.select(s)).transpose()?;
    let (train, seg) = single_task_views(&stage.op, train, seg);
    let val = &bench.val;
    let catalog = &bench.catalog;

    let result: TrainResult<f32> = match stage.op.as_str() {
        "supervised" => train_supervised(&spec, catalog, &anchors, &train, val, &tc)?,
        "teacher" => train_teacher(&spec, catalog, &anchors, &train, val, &tc)?,
        "segmentation" => train_segmentation(&spec, catalog, &anchors, &train, val, &tc)?,
        "self" => {
            let teacher = load_stage_model(run_dir, stage.teacher.as_ref().unwrap(), &stage.name)?;
            train_self(&spec, &teacher, &train, val, &tc)?
        }
        "crosstask" => {
            let teacher = load_stage_model(run_dir, stage.teacher.as_ref().unwrap(), &stage.name)?;
            train_crosstask_kd(&spec, catalog, &anchors, &teacher, &train, val, &tc)?
        }
        "multitask" => {
            let seg = seg.as_ref().unwrap();
            train_multitask(&spec, catalog, &anchors, &train, seg, val, &tc)?
        }
        "multitask_selftrain" => {
            let teacher = load_stage_model(run_dir, stage.teacher.as_ref().unwrap(), &stage.name)?;
            let seg = seg.as_ref().unwrap();
            train_multitask_selftrain(&spec, &teacher, &train, seg, val, &tc)?
        }
        other => {
            return Err(Error::Config(format!(
                "stage {}: op `{other}` is not one of supervised|teacher|segmentation|self|\
                 crosstask|multitask|multitask_selftrain",
                stage.name
            )));
        }
    };

    let dir = stage_dir(run_dir, &stage.name);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let checkpoint = dir.join("checkpoint.ckpt");
    result.model.save(&checkpoint)?;
    let history = dir.join("history.jsonl");
    save_history(&history, &result.history)?;

    let (metric, report, seg_iou) = evaluate(&result.model, val)?;
    if let Some(r) = &report {
        let path = dir.join("report.json");
        std::fs::write(&path, r.to_json()?).map_err(io_err(&path))?;
    }

    Ok(StageRecord {
        name: stage.name.clone(),
        label: stage.label().to_string(),
        op: stage.op.clone(),
        train_split: stage.train.clone(),
        config_hash: hash.to_string(),
        epochs_run: result.history.len(),
        best_epoch: result.state.best_epoch,
        val_map: metric.map,
        val_ap50: report.as_ref().map(|r| r.ap50).unwrap_or(0.0),
        val_seg_iou: seg_iou,
        report,
        checkpoint: checkpoint.strip_prefix(run_dir).unwrap_or(&checkpoint).to_path_buf(),
        history: history.strip_prefix(run_dir).unwrap_or(&history).to_path_buf(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn write_stage_record(run_dir: &Path, rec: &StageRecord) -> Result<()> {
    let path = stage_dir(run_dir, &rec.name).join("stage.json");
    let text = serde_json::to_string_pretty(rec)
        .map_err(|e| Error::Data(format!("stage record encode: {e}")))?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

fn write_run_record(run_dir: &Path, rec: &RunRecord) -> Result<()> {
    let path = run_dir.join("record.json");
    let text = serde_json::to_string_pretty(rec)
        .map_err(|e| Error::Data(format!("run record encode: {e}")))?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_run_record(run_dir: &Path) -> Result<RunRecord> {
    let path = run_dir.join("record.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path,
        msg: e.to_string(),
    })
}

/// Writes the canonical config next to the outputs and returns its hash.
/// A stored config with different bytes is replaced, which invalidates the
/// stage records hashed against it.
fn store_config(cfg: &ExperimentConfig, run_dir: &Path) -> Result<String> {
    let text = cfg.to_toml()?;
    let path = run_dir.join("config.toml");
    let stale = match std::fs::read_to_string(&path) {
        Ok(existing) => existing != text,
        Err(_) => true,
    };
    if stale {
        std::fs::write(&path, &text).map_err(io_err(&path))?;
    }
    cfg.hash()
}

/// Runs every stage of one config, reusing finished stages. Each stage's
/// progress lands under `run_dir/<stage-name>/`.
pub fn run_config(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let hash = store_config(cfg, run_dir)?;
    let bench = materialize(cfg)?;
    let start = Instant::now();

    let mut stages = Vec::with_capacity(cfg.stages.len());
    for stage in &cfg.stages {
        let rec = match finished(run_dir, stage, &hash) {
            Some(rec) => {
                eprintln!("[{}] {} already finished, skipping", cfg.name, stage.name);
                rec
            }
            None => {
                eprintln!("[{}] running {} ({})", cfg.name, stage.name, stage.op);
                let rec = execute_stage(cfg, &bench, stage, run_dir, &hash)?;
                write_stage_record(run_dir, &rec)?;
                rec
            }
        };
        stages.push(rec);
        let partial = RunRecord {
            name: cfg.name.clone(),
            config_hash: hash.clone(),
            source_rev: source_rev(),
            seed: cfg.seed,
            stages: stages.clone(),
            total_wall_time_s: start.elapsed().as_secs_f64(),
        };
        write_run_record(run_dir, &partial)?;
    }

    load_run_record(run_dir)
}

/// Record covering every stage that has finished under the current hash.
fn assemble_record(cfg: &ExperimentConfig, run_dir: &Path, hash: &str) -> RunRecord {
    let stages: Vec<StageRecord> = cfg
        .stages
        .iter()
        .filter_map(|s| finished(run_dir, s, hash))
        .collect();
    let total = stages.iter().map(|s| s.wall_time_s).sum();
    RunRecord {
        name: cfg.name.clone(),
        config_hash: hash.to_string(),
        source_rev: source_rev(),
        seed: cfg.seed,
        stages,
        total_wall_time_s: total,
    }
}

/// Runs one named stage of a config; stages it depends on must have finished.
pub fn run_single_stage(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stage_name: &str,
) -> Result<StageRecord> {
    cfg.validate()?;
    let stage = cfg
        .stages
        .iter()
        .find(|s| s.name == stage_name)
        .ok_or_else(|| {
            let known: Vec<&str> = cfg.stages.iter().map(|s| s.name.as_str()).collect();
            Error::Config(format!(
                "stage `{stage_name}` is not in the config (have: {})",
                known.join(", ")
            ))
        })?;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let hash = store_config(cfg, run_dir)?;
    if let Some(rec) = finished(run_dir, stage, &hash) {
        eprintln!("[{}] {} already finished, skipping", cfg.name, stage.name);
        return Ok(rec);
    }
    let bench = materialize(cfg)?;
    let rec = execute_stage(cfg, &bench, stage, run_dir, &hash)?;
    write_stage_record(run_dir, &rec)?;
    write_run_record(run_dir, &assemble_record(cfg, run_dir, &hash))?;
    Ok(rec)
}

/// Re-evaluates a finished stage's checkpoint on the config's validation set.
pub fn eval_stage(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stage_name: &str,
) -> Result<(f64, Option<MetricReport>, Option<f64>)> {
    cfg.validate()?;
    let model = load_stage_model(run_dir, stage_name, "eval")?;
    let bench = materialize(cfg)?;
    let (metric, report, seg_iou) = evaluate(&model, &bench.val)?;
    Ok((metric.map, report, seg_iou))
}

/// Runs configs sequentially into disjoint directories under `base`. A
/// failing config is reported and the rest still run.
pub fn run_matrix(configs: &[ExperimentConfig], base: &Path) -> Result<Vec<MatrixEntry>> {
    let mut seen = std::collections::HashSet::new();
    for cfg in configs {
        if !seen.insert(cfg.name.as_str()) {
            return Err(Error::Config(format!(
                "matrix: duplicate config name `{}`",
                cfg.name
            )));
        }
    }
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        let dir = base.join(&cfg.name);
        let outcome = run_config(cfg, &dir).map_err(|e| e.to_string());
        if let Err(msg) = &outcome {
            eprintln!("[{}] failed: {msg}", cfg.name);
        }
        out.push(MatrixEntry {
            name: cfg.name.clone(),
            dir,
            outcome,
        });
    }
    Ok(out)
}
