//! Training engines. One optimizer loop drives every mode: plain supervised
//! detection, mutual-guide teacher training, soft-target self-training against
//! a frozen teacher, cross-task feature distillation, and alternating
//! multi-task optimization with a single parameter update per iteration pair.
//!
//! The loop is deliberately rigid about randomness: every shuffle and every
//! augmentation draw comes from its own named stream, keyed by config seed,
//! epoch and schedule position. Two runs with the same config and data are
//! bitwise identical, and degenerate configurations (no distillation, empty
//! segmentation split) collapse onto the simpler mode they imitate, stream
//! for stream.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{
    decode_boxes, encode_boxes, make_soft_targets, match_iou, match_mutual_guide, AnchorMatch,
    MatchResult,
};
use crate::dataset::{ClassCatalog, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{self, Detection, GroundTruth, MetricReport};
use crate::geometry::Box2;
use crate::loss::{
    assemble, balanced_l1, kd_defeat, kd_mse, kd_pdf, quality_focal, seg_cross_entropy, soft_focal,
    KDConfig, KDMethod, LossBundle, LossComponents, LossMode, Projector, BALANCED_L1_ALPHA,
    BALANCED_L1_GAMMA,
};
use crate::model::{build_model, neck_channels, preprocess, AnchorConfig, Model, ModelOutput, ModelSpec, OutputGrad};
use crate::nn::ops::{resize_bilinear, resize_nearest_mask};
use crate::nn::{Feat, GradBuf, ParamReg, ParamSet};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_EPOCHS: usize = 70;
pub const DEFAULT_PATIENCE: usize = 10;

/// IoU thresholds for hard anchor assignment.
pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.4;

/// Focal exponents: `beta` for quality targets, `gamma` for soft targets.
pub const QUALITY_BETA: f64 = 2.0;
pub const SOFT_GAMMA: f64 = 2.0;

/// Random-resize scale range; sizes snap to the coarsest stride.
const RESIZE_LO: f64 = 0.75;
const RESIZE_HI: f64 = 1.25;

/// Post-NMS teacher detections above this score mark foreground regions when
/// region-weighted distillation runs without ground-truth boxes.
const TEACHER_REGION_SCORE: f64 = 0.3;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    SelfTrain,
    CrosstaskKd,
    Multitask,
    MultitaskSelftrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "optimizer: learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "optimizer: momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optimizer: weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Epochs without a validation improvement before the run stops.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub kd: KDConfig,
    /// Checkpoint whose weights replace random init before step zero.
    pub pretrain_from: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            epochs: DEFAULT_EPOCHS,
            early_stop_patience: DEFAULT_PATIENCE,
            batch_size: 2,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            kd: KDConfig::default(),
            pretrain_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train: epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config(
                "train: early_stop_patience must be positive".into(),
            ));
        }
        // A single-epoch run is capped by the epoch count alone.
        if self.epochs > 1 && self.early_stop_patience >= self.epochs {
            return Err(Error::Config(format!(
                "train: early_stop_patience {} must be smaller than epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        self.optimizer.validate()?;
        self.kd.validate()
    }
}

/// Effective learning rate for one epoch: the base rate scaled by batch size,
/// cosine-decayed over the configured epoch budget.
pub fn learning_rate(opt: &OptimizerConfig, batch_size: usize, epoch: usize, total_epochs: usize) -> f64 {
    let base = opt.lr * batch_size as f64;
    match opt.schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
        }
    }
}

/// Per-update gradient clipping threshold (global L2 norm, applied after
/// batch averaging). The soft classification loss is heavy-tailed: a batch
/// that disagrees hard with the teacher can spike to many times the typical
/// supervised gradient norm and derail the run.
pub const GRAD_CLIP_NORM: f64 = 10.0;

fn clip_global_norm<S: Scalar>(grads: &mut GradBuf<S>) {
    let sq: f64 = grads.data().iter().map(|g| g.as_f64() * g.as_f64()).sum();
    let norm = sq.sqrt();
    if norm > GRAD_CLIP_NORM {
        grads.scale(S::from_f64(GRAD_CLIP_NORM / norm));
    }
}

// ---------------------------------------------------------------------------
// early stopping

/// Validation score: detection mAP first, segmentation IoU breaks exact ties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetric {
    pub map: f64,
    pub seg_iou: Option<f64>,
}

impl ValMetric {
    pub fn better_than(&self, other: &ValMetric) -> bool {
        if self.map != other.map {
            return self.map > other.map;
        }
        self.seg_iou.unwrap_or(0.0) > other.seg_iou.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied.
    pub step: u64,
    pub best_val_metric: Option<ValMetric>,
    pub epochs_since_best: usize,
    /// Epoch whose weights the retained snapshot holds.
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new() -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_val_metric: None,
            epochs_since_best: 0,
            best_epoch: 0,
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Record the metric for the epoch `state.epoch` and decide whether to go on.
/// Stops once the metric has not improved for `patience` epochs, or at the
/// epoch cap, whichever comes first. A new best resets the counter and moves
/// `best_epoch` to the current epoch.
pub fn early_stop(
    state: &mut TrainState,
    metric: ValMetric,
    patience: usize,
    max_epochs: usize,
) -> Decision {
    let improved = match &state.best_val_metric {
        None => true,
        Some(best) => metric.better_than(best),
    };
    if improved {
        state.best_val_metric = Some(metric);
        state.best_epoch = state.epoch;
        state.epochs_since_best = 0;
    } else {
        state.epochs_since_best += 1;
    }
    if state.epochs_since_best >= patience || state.epoch >= max_epochs {
        Decision::Stop
    } else {
        Decision::Continue
    }
}

// ---------------------------------------------------------------------------
// history and run telemetry

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sum of per-task mean weighted totals.
    pub loss_total: f64,
    pub loss_loc: Option<f64>,
    pub loss_cls: Option<f64>,
    pub loss_seg: Option<f64>,
    pub loss_kd: Option<f64>,
    pub val_map: f64,
    pub val_ap50: f64,
    pub val_seg_iou: Option<f64>,
    /// Hex digest of the parameters after this epoch's updates.
    pub param_hash: String,
    pub wall_time_s: f64,
}

pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    for rec in history {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Data(format!("history encode: {e}")))?;
        writeln!(f, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("history line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Invariant bookkeeping for one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mini-batch samples assigned through the mutual-guide path.
    pub mutual_guide_batches: u64,
    /// Whether every teacher's parameter hash survived the run unchanged.
    pub teacher_hash_unchanged: Option<bool>,
    /// Annotation accessor invocations on the detection split during training.
    /// Provably zero for soft-supervised branches.
    pub det_annotation_reads: u64,
    /// Whether the loaded pretrain checkpoint hash matched the parameters at
    /// step zero.
    pub pretrain_hash_matched: Option<bool>,
}

pub struct TrainResult<S: Scalar> {
    /// Weights from the best validation epoch.
    pub model: Model<S>,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    pub stats: TrainStats,
}

// ---------------------------------------------------------------------------
// optimizer

struct Sgd<S> {
    velocity: Vec<S>,
    momentum: S,
    weight_decay: S,
}

impl<S: Scalar> Sgd<S> {
    fn new(n: usize, opt: &OptimizerConfig) -> Self {
        Self {
            velocity: vec![S::zero(); n],
            momentum: S::from_f64(opt.momentum),
            weight_decay: S::from_f64(opt.weight_decay),
        }
    }

    fn step(&mut self, params: &mut ParamSet<S>, grads: &GradBuf<S>, lr: S, frozen: &[bool]) {
        let g = grads.data();
        let p = params.data_mut();
        for i in 0..p.len() {
            if frozen[i] {
                continue;
            }
            let v = self.momentum * self.velocity[i] + g[i] + self.weight_decay * p[i];
            self.velocity[i] = v;
            p[i] -= lr * v;
        }
    }
}

// ---------------------------------------------------------------------------
// augmentation

struct AugSample<S: Scalar> {
    image: Feat<S>,
    boxes: Vec<Box2<S>>,
    classes: Vec<usize>,
    mask: Option<Array2<u8>>,
}

fn snap(dim: usize, scale: f64, stride: usize) -> usize {
    let cells = (dim as f64 * scale / stride as f64).round().max(1.0) as usize;
    cells * stride
}

/// Horizontal flip plus random resize, with targets transformed to match.
/// Reading boxes or masks is skipped (and so never counted) unless the branch
/// actually trains on them.
fn augment<S: Scalar>(
    sample: &ImageSample,
    want_boxes: bool,
    want_mask: bool,
    coarsest: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AugSample<S>> {
    let flip = rng.random_range(0.0..1.0) < 0.5;
    let scale = rng.random_range(RESIZE_LO..RESIZE_HI);
    let (h, w) = (sample.height, sample.width);
    let (th, tw) = (snap(h, scale, coarsest), snap(w, scale, coarsest));
    let (sx, sy) = (tw as f64 / w as f64, th as f64 / h as f64);

    let pixels = if flip {
        sample.pixels.slice(s![.., ..;-1, ..]).to_owned()
    } else {
        sample.pixels.clone()
    };
    let image = resize_bilinear(&preprocess::<S>(&pixels), th, tw);

    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    if want_boxes {
        let anns = sample.detections().ok_or_else(|| {
            Error::Data(format!("sample {} has no detection labels", sample.id))
        })?;
        for ann in anns {
            let mut b = ann.bbox;
            if flip {
                b = b.hflipped(w as f64);
            }
            boxes.push(
                Box2::new(b.xmin * sx, b.ymin * sy, b.xmax * sx, b.ymax * sy).cast::<S>(),
            );
            classes.push(ann.class_id);
        }
    }

    let mask = if want_mask {
        let m = sample
            .seg_mask()
            .ok_or_else(|| Error::Data(format!("sample {} has no segmentation mask", sample.id)))?;
        let m = if flip { m.slice(s![.., ..;-1]).to_owned() } else { m.clone() };
        Some(resize_nearest_mask(&m, th, tw))
    } else {
        None
    };

    Ok(AugSample {
        image,
        boxes,
        classes,
        mask,
    })
}

// ---------------------------------------------------------------------------
// per-sample steps

fn gather_rows<S: Scalar>(a: &Array2<S>, rows: &[usize]) -> Array2<S> {
    let mut out = Array2::zeros((rows.len(), a.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&a.row(r));
    }
    out
}

fn scatter_rows<S: Scalar>(n: usize, ncols: usize, rows: &[usize], src: &Array2<S>) -> Array2<S> {
    let mut out = Array2::zeros((n, ncols));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(r).assign(&src.row(k));
    }
    out
}

enum DetSupervision<'a, S: Scalar> {
    Hard { mutual_guide: bool },
    Soft { teacher: &'a Model<S> },
}

struct KdPack<'a, S: Scalar> {
    teacher: &'a Model<S>,
    projector: &'a Projector,
    params: &'a ParamSet<S>,
}

/// Foreground regions for region-weighted distillation when no ground truth
/// may be consumed: the teacher's own confident post-NMS detections.
fn teacher_regions<S: Scalar>(
    t_out: &ModelOutput<S>,
    anchors: &[Box2<S>],
    size: (usize, usize),
) -> Result<Vec<Box2<S>>> {
    let det = t_out
        .det
        .as_ref()
        .ok_or_else(|| Error::Config("region weighting needs teacher detections".into()))?;
    let dets = eval::decode_detections(det, anchors, "t", size, eval::SCORE_THRESH)?;
    Ok(eval::nms(&dets, eval::NMS_IOU, eval::NMS_TOP_K)
        .into_iter()
        .filter(|d| d.score >= TEACHER_REGION_SCORE)
        .map(|d| d.bbox.cast::<S>())
        .collect())
}

/// One detection sample: forward, mode-specific losses, optional feature
/// distillation, backward. Gradients accumulate unscaled; the caller averages
/// over the mini-batch.
#[allow(clippy::too_many_arguments)]
fn det_step<S: Scalar>(
    model: &Model<S>,
    aug: &AugSample<S>,
    sup: &DetSupervision<'_, S>,
    kd: Option<&KdPack<'_, S>>,
    kd_cfg: &KDConfig,
    grads: &mut GradBuf<S>,
    kd_grads: Option<&mut GradBuf<S>>,
    stats: &mut TrainStats,
) -> Result<LossBundle<S>> {
    let (_, h, w) = aug.image.dim();
    let (out, trace) = model.forward_traced(&aug.image)?;
    let det = out
        .det
        .as_ref()
        .ok_or_else(|| Error::Config("detection training needs a detection head".into()))?;
    let anchors = model.anchors_for(h, w)?;
    let n = anchors.len();
    let ncls = model.catalog().len();

    let mut teacher_out: Option<ModelOutput<S>> = None;
    let (mode, loc, g_reg, cls, g_cls) = match sup {
        DetSupervision::Hard { mutual_guide } => {
            let m = if aug.boxes.is_empty() {
                MatchResult {
                    anchors: vec![AnchorMatch::Negative; n],
                }
            } else if *mutual_guide {
                stats.mutual_guide_batches += 1;
                match_mutual_guide(&anchors, &aug.boxes, &aug.classes, &det.cls, &det.reg)?
            } else {
                match_iou(&anchors, &aug.boxes, S::from_f64(POS_IOU), S::from_f64(NEG_IOU))?
            };
            let pos: Vec<(usize, usize)> = m.positives().collect();

            let (loc, g_reg) = if pos.is_empty() {
                (S::zero(), Array2::zeros((n, 4)))
            } else {
                let rows: Vec<usize> = pos.iter().map(|&(a, _)| a).collect();
                let pred = gather_rows(&det.reg, &rows);
                let pos_anchors: Vec<Box2<S>> = rows.iter().map(|&r| anchors[r]).collect();
                let gt: Vec<Box2<S>> = pos.iter().map(|&(_, g)| aug.boxes[g]).collect();
                let target = encode_boxes(&gt, &pos_anchors)?;
                let (v, g) = balanced_l1(&pred, &target, BALANCED_L1_ALPHA, BALANCED_L1_GAMMA)?;
                (v, scatter_rows(n, 4, &rows, &g))
            };

            // Quality targets: the IoU of each positive's decoded prediction
            // with its box, at the matched class; constants w.r.t. the logits.
            let mut targets = Array2::zeros((n, ncls));
            if !pos.is_empty() {
                let rows: Vec<usize> = pos.iter().map(|&(a, _)| a).collect();
                let pred = gather_rows(&det.reg, &rows);
                let pos_anchors: Vec<Box2<S>> = rows.iter().map(|&r| anchors[r]).collect();
                let decoded = decode_boxes(&pred, &pos_anchors)?;
                for (k, &(a, g)) in pos.iter().enumerate() {
                    let q = decoded[k].iou(&aug.boxes[g]);
                    let q = if q.is_finite() { q.max(S::zero()).min(S::one()) } else { S::zero() };
                    targets[(a, aug.classes[g])] = q;
                }
            }
            let kept: Vec<usize> = (0..n)
                .filter(|&i| !matches!(m.anchors[i], AnchorMatch::Ignore))
                .collect();
            let (cls, g_cls) = if kept.len() == n {
                quality_focal(&det.cls, &targets, QUALITY_BETA)?
            } else {
                let pk = gather_rows(&det.cls, &kept);
                let tk = gather_rows(&targets, &kept);
                let (v, gk) = quality_focal(&pk, &tk, QUALITY_BETA)?;
                (v, scatter_rows(n, ncls, &kept, &gk))
            };
            (LossMode::Supervised, loc, g_reg, cls, g_cls)
        }
        DetSupervision::Soft { teacher } => {
            let t_out = teacher.forward(&aug.image)?;
            let t_det = t_out
                .det
                .as_ref()
                .ok_or_else(|| Error::Config("self-training teacher has no detection head".into()))?;
            let soft = make_soft_targets(t_det, n)?;
            let (cls, g_cls) = soft_focal(&det.cls, &soft.cls_scores, SOFT_GAMMA, 1.0)?;
            let (loc, g_reg) =
                balanced_l1(&det.reg, &soft.reg_deltas, BALANCED_L1_ALPHA, BALANCED_L1_GAMMA)?;
            teacher_out = Some(t_out);
            (LossMode::SelfTrain, loc, g_reg, cls, g_cls)
        }
    };

    let mut kd_component = None;
    let mut pyr_grad = None;
    if let Some(pack) = kd {
        let fresh;
        let t_out = match &teacher_out {
            Some(o) => o,
            None => {
                fresh = pack.teacher.forward(&aug.image)?;
                &fresh
            }
        };
        let kd_grads = kd_grads.expect("kd gradient buffer accompanies a kd pack");
        let (v, gx) = match kd_cfg.method {
            KDMethod::Mse => {
                kd_mse(pack.params, pack.projector, &t_out.pyramid, &out.pyramid, kd_grads)?
            }
            KDMethod::Defeat => {
                let regions = match sup {
                    DetSupervision::Hard { .. } => aug.boxes.clone(),
                    DetSupervision::Soft { .. } => teacher_regions(t_out, &anchors, (h, w))?,
                };
                kd_defeat(
                    pack.params,
                    pack.projector,
                    &t_out.pyramid,
                    &out.pyramid,
                    &model.anchor_config().strides,
                    &regions,
                    kd_cfg.fg_weight,
                    kd_cfg.bg_weight,
                    kd_grads,
                )?
            }
            KDMethod::Pdf => kd_pdf(
                pack.params,
                pack.projector,
                &t_out.pyramid,
                &out.pyramid,
                &t_out.cls_maps,
                &out.cls_maps,
                kd_grads,
            )?,
            KDMethod::None => unreachable!("kd pack built without a method"),
        };
        kd_component = Some(v);
        let wk = S::from_f64(kd_cfg.weight);
        pyr_grad = Some(gx.into_iter().map(|g| g.mapv(|x| x * wk)).collect::<Vec<_>>());
    }

    let comps = LossComponents {
        loc: Some(loc),
        cls: Some(cls),
        seg: None,
        kd: kd_component,
    };
    let bundle = assemble(&comps, mode, kd_cfg)?;
    let weight_of = |name: &str| {
        bundle
            .terms
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.weight)
            .unwrap_or_else(S::one)
    };
    let og = OutputGrad {
        cls: Some(g_cls.mapv(|x| x * weight_of("cls"))),
        reg: Some(g_reg.mapv(|x| x * weight_of("loc"))),
        seg: None,
        pyramid: pyr_grad,
    };
    model.backward(&trace, &og, grads)?;
    Ok(bundle)
}

fn seg_step<S: Scalar>(
    model: &Model<S>,
    aug: &AugSample<S>,
    grads: &mut GradBuf<S>,
) -> Result<LossBundle<S>> {
    let (out, trace) = model.forward_traced(&aug.image)?;
    let logits = out
        .seg
        .as_ref()
        .ok_or_else(|| Error::Config("segmentation training needs a segmentation head".into()))?;
    let mask = aug.mask.as_ref().expect("segmentation step without a mask");
    let sl = seg_cross_entropy(logits, mask)?;
    let comps = LossComponents {
        loc: None,
        cls: None,
        seg: Some(sl.value),
        kd: None,
    };
    let bundle = assemble(&comps, LossMode::Segmentation, &KDConfig::default())?;
    let og = OutputGrad {
        cls: None,
        reg: None,
        seg: Some(sl.grad),
        pyramid: None,
    };
    model.backward(&trace, &og, grads)?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// validation

/// Detection metrics plus mean segmentation IoU over a labeled split, using
/// one forward pass per image. Samples missing a task's labels simply do not
/// take part in that task's score.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    val: &[ImageSample],
) -> Result<(ValMetric, Option<MetricReport>, Option<f64>)> {
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut seg_preds: Vec<Array2<u8>> = Vec::new();
    let mut seg_gts: Vec<Array2<u8>> = Vec::new();
    let want_det = model.spec().with_det();
    let want_seg = model.spec().with_seg();

    for sample in val {
        let use_det = want_det && sample.has_detection();
        let use_seg = want_seg && sample.has_segmentation();
        if !use_det && !use_seg {
            continue;
        }
        let x = preprocess::<S>(&sample.pixels);
        let out = model.forward(&x)?;
        if use_det {
            let det = out.det.as_ref().expect("detection head produced no output");
            let anchors = model.anchors_for(sample.height, sample.width)?;
            let raw = eval::decode_detections(
                det,
                &anchors,
                &sample.id,
                (sample.height, sample.width),
                eval::SCORE_THRESH,
            )?;
            dets.extend(eval::nms(&raw, eval::NMS_IOU, eval::NMS_TOP_K));
            for ann in sample.detections().expect("labeled sample lost its boxes") {
                gts.push(GroundTruth {
                    image_id: sample.id.clone(),
                    class_id: ann.class_id,
                    bbox: ann.bbox,
                    difficult: ann.difficult,
                });
            }
        }
        if use_seg {
            let logits = out.seg.as_ref().expect("segmentation head produced no output");
            let (c, h, w) = logits.dim();
            let mut pred = Array2::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0usize;
                    for k in 1..c {
                        if logits[(k, i, j)] > logits[(best, i, j)] {
                            best = k;
                        }
                    }
                    pred[(i, j)] = best as u8;
                }
            }
            seg_preds.push(pred);
            seg_gts.push(sample.seg_mask().expect("labeled sample lost its mask").clone());
        }
    }

    let report = if gts.is_empty() {
        None
    } else {
        Some(MetricReport::detection(&dets, &gts, model.catalog(), false)?)
    };
    let seg_iou = if seg_gts.is_empty() {
        None
    } else {
        Some(eval::seg_iou(&seg_preds, &seg_gts, model.catalog().seg_classes())?.mean)
    };
    let metric = ValMetric {
        map: report.as_ref().map_or(0.0, |r| r.map),
        seg_iou,
    };
    Ok((metric, report, seg_iou))
}

// ---------------------------------------------------------------------------
// the shared run loop

enum Samples<'a> {
    Borrowed(&'a [ImageSample]),
    Owned(Vec<ImageSample>),
}

impl Samples<'_> {
    fn as_slice(&self) -> &[ImageSample] {
        match self {
            Samples::Borrowed(s) => s,
            Samples::Owned(v) => v,
        }
    }
}

struct DetPlan<'a, S: Scalar> {
    samples: Samples<'a>,
    soft_teacher: Option<&'a Model<S>>,
    mutual_guide: bool,
}

struct RunPlan<'a, S: Scalar> {
    det: Option<DetPlan<'a, S>>,
    seg: Option<&'a [ImageSample]>,
    kd_teacher: Option<&'a Model<S>>,
    val: &'a [ImageSample],
}

fn hex32(h: [u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

fn mean(sum: f64, n: u64) -> Option<f64> {
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

fn run<S: Scalar>(
    mut model: Model<S>,
    plan: RunPlan<'_, S>,
    cfg: &TrainConfig,
    pretrain_hash: Option<[u8; 32]>,
) -> Result<TrainResult<S>> {
    cfg.validate()?;
    let coarsest = *model
        .spec()
        .scale
        .strides()
        .last()
        .expect("a scale always carries strides");

    let mut stats = TrainStats::default();
    stats.pretrain_hash_matched =
        pretrain_hash.map(|h| h == model.params().content_hash());

    let teacher_hashes: Vec<([u8; 32], &Model<S>)> = plan
        .det
        .as_ref()
        .and_then(|d| d.soft_teacher)
        .into_iter()
        .chain(plan.kd_teacher)
        .map(|t| (t.params().content_hash(), t))
        .collect();

    let det_len = plan.det.as_ref().map_or(0, |d| d.samples.as_slice().len());
    let seg_len = plan.seg.map_or(0, |s| s.len());
    if det_len == 0 && seg_len == 0 {
        return Err(Error::Data("train: no training samples".into()));
    }
    let soft = plan
        .det
        .as_ref()
        .is_some_and(|d| d.soft_teacher.is_some());
    let det_reads_before: u64 = plan.det.as_ref().map_or(0, |d| {
        d.samples.as_slice().iter().map(|s| s.annotation_reads()).sum()
    });

    // Distillation apparatus: a projector mapping student pyramid channels
    // onto the teacher's, trained jointly with its own optimizer state.
    let mut kd_params = ParamSet::<S>::new();
    let mut kd_layers = Vec::new();
    let projector = if cfg.kd.method != KDMethod::None {
        let teacher = plan
            .kd_teacher
            .ok_or_else(|| Error::Config("kd configured without a teacher".into()))?;
        let s_ch = neck_channels(model.spec());
        let t_ch = neck_channels(teacher.spec());
        let levels = model.spec().scale.strides().len();
        if s_ch == t_ch {
            Some(Projector::Identity)
        } else {
            let mut kd_rng = rng::stream(cfg.seed, "projector-init");
            let mut reg = ParamReg {
                params: &mut kd_params,
                rng: &mut kd_rng,
                layers: &mut kd_layers,
            };
            Some(Projector::conv1x1(&mut reg, "kd.proj", s_ch, t_ch, levels))
        }
    } else {
        None
    };

    let mut sgd = Sgd::new(model.params().data().len(), &cfg.optimizer);
    let frozen = model.params().frozen_mask();
    let mut kd_sgd = Sgd::new(kd_params.data().len(), &cfg.optimizer);
    let kd_frozen = kd_params.frozen_mask();

    let mut grads = GradBuf::zeros_like(model.params());
    let mut seg_grads = plan.seg.map(|_| GradBuf::zeros_like(model.params()));
    let mut kd_grads = projector.as_ref().map(|_| GradBuf::zeros_like(&kd_params));

    let longer = det_len.max(seg_len);
    let iters_per_epoch = longer.div_ceil(cfg.batch_size);

    let mut state = TrainState::new();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_params: Vec<S> = model.params().data().to_vec();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = learning_rate(&cfg.optimizer, cfg.batch_size, epoch, cfg.epochs);
        let lr_s = S::from_f64(lr);

        let det_order: Vec<usize> = {
            let mut v: Vec<usize> = (0..det_len).collect();
            v.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle-det/{epoch}")));
            v
        };
        let seg_order: Vec<usize> = {
            let mut v: Vec<usize> = (0..seg_len).collect();
            v.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle-seg/{epoch}")));
            v
        };

        let mut sums = [0.0f64; 4]; // loc, cls, seg, kd
        let mut counts = [0u64; 4];
        let mut det_total = 0.0f64;
        let mut seg_total = 0.0f64;
        let mut tally = |bundle: &LossBundle<S>, branch_total: &mut f64| {
            *branch_total += bundle.total().as_f64();
            for t in &bundle.terms {
                let slot = match t.name {
                    "loc" => 0,
                    "cls" => 1,
                    "seg" => 2,
                    "kd" => 3,
                    _ => continue,
                };
                sums[slot] += t.value.as_f64();
                counts[slot] += 1;
            }
        };

        for k in 0..iters_per_epoch {
            let start = k * cfg.batch_size;

            if let Some(det) = &plan.det {
                let samples = det.samples.as_slice();
                // The longer split drains naturally; a shorter one cycles.
                let end = if det_len == longer {
                    (start + cfg.batch_size).min(det_len)
                } else {
                    start + cfg.batch_size
                };
                grads.data_mut().fill(S::zero());
                if let Some(kg) = kd_grads.as_mut() {
                    kg.data_mut().fill(S::zero());
                }
                let n_det = end - start;
                for pos in start..end {
                    let sample = &samples[det_order[pos % det_len]];
                    let mut aug_rng =
                        rng::substream(cfg.seed, &format!("aug-det/{epoch}"), pos as u64);
                    let aug = augment::<S>(sample, !soft, false, coarsest, &mut aug_rng)?;
                    let sup = match det.soft_teacher {
                        Some(t) => DetSupervision::Soft { teacher: t },
                        None => DetSupervision::Hard {
                            mutual_guide: det.mutual_guide,
                        },
                    };
                    let pack = projector.as_ref().map(|p| KdPack {
                        teacher: plan.kd_teacher.expect("projector built with a teacher"),
                        projector: p,
                        params: &kd_params,
                    });
                    let bundle = det_step(
                        &model,
                        &aug,
                        &sup,
                        pack.as_ref(),
                        &cfg.kd,
                        &mut grads,
                        kd_grads.as_mut(),
                        &mut stats,
                    )?;
                    tally(&bundle, &mut det_total);
                }
                grads.scale(S::from_f64(1.0 / n_det as f64));
                if let Some(kg) = kd_grads.as_mut() {
                    kg.scale(S::from_f64(cfg.kd.weight / n_det as f64));
                }
            } else {
                grads.data_mut().fill(S::zero());
            }

            if let Some(seg) = plan.seg {
                if seg_len > 0 {
                    let end = if seg_len == longer {
                        (start + cfg.batch_size).min(seg_len)
                    } else {
                        start + cfg.batch_size
                    };
                    let sg = seg_grads.as_mut().expect("seg buffer allocated with the plan");
                    sg.data_mut().fill(S::zero());
                    let n_seg = end - start;
                    for pos in start..end {
                        let sample = &seg[seg_order[pos % seg_len]];
                        let mut aug_rng =
                            rng::substream(cfg.seed, &format!("aug-seg/{epoch}"), pos as u64);
                        let aug = augment::<S>(sample, false, true, coarsest, &mut aug_rng)?;
                        let bundle = seg_step(&model, &aug, sg)?;
                        tally(&bundle, &mut seg_total);
                    }
                    sg.scale(S::from_f64(1.0 / n_seg as f64));
                    grads.add_assign(sg);
                }
            }

            clip_global_norm(&mut grads);
            sgd.step(model.params_mut(), &grads, lr_s, &frozen);
            if let Some(kg) = kd_grads.as_mut() {
                clip_global_norm(kg);
                kd_sgd.step(&mut kd_params, kg, lr_s, &kd_frozen);
            }
            state.step += 1;
        }

        let (metric, report, seg_iou) = evaluate(&model, plan.val)?;
        state.epoch = epoch + 1;
        let decision = early_stop(&mut state, metric, cfg.early_stop_patience, cfg.epochs);
        if state.best_epoch == state.epoch {
            best_params.copy_from_slice(model.params().data());
        }

        let det_n = counts[0];
        let seg_n = counts[2];
        history.push(EpochRecord {
            epoch: state.epoch,
            lr,
            loss_total: mean(det_total, det_n).unwrap_or(0.0)
                + mean(seg_total, seg_n).unwrap_or(0.0),
            loss_loc: mean(sums[0], counts[0]),
            loss_cls: mean(sums[1], counts[1]),
            loss_seg: mean(sums[2], counts[2]),
            loss_kd: mean(sums[3], counts[3]),
            val_map: metric.map,
            val_ap50: report.as_ref().map_or(0.0, |r| r.ap50),
            val_seg_iou: seg_iou,
            param_hash: hex32(model.params().content_hash()),
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if decision == Decision::Stop {
            break;
        }
    }

    model
        .params_mut()
        .data_mut()
        .copy_from_slice(&best_params);

    let det_reads_after: u64 = plan.det.as_ref().map_or(0, |d| {
        d.samples.as_slice().iter().map(|s| s.annotation_reads()).sum()
    });
    stats.det_annotation_reads = det_reads_after - det_reads_before;
    if soft && stats.det_annotation_reads != 0 {
        return Err(Error::Consistency(format!(
            "soft-supervised branch read ground-truth annotations {} times",
            stats.det_annotation_reads
        )));
    }

    if !teacher_hashes.is_empty() {
        let unchanged = teacher_hashes
            .iter()
            .all(|(h, t)| *h == t.params().content_hash());
        stats.teacher_hash_unchanged = Some(unchanged);
        if !unchanged {
            return Err(Error::Consistency(
                "teacher parameters changed during training".into(),
            ));
        }
    }

    Ok(TrainResult {
        model,
        history,
        state,
        stats,
    })
}

// ---------------------------------------------------------------------------
// engine entry points

fn expect_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "train: config mode {:?} does not match the requested {:?} run",
            cfg.mode, mode
        )));
    }
    Ok(())
}

fn require_no_kd(cfg: &TrainConfig, what: &str) -> Result<()> {
    if cfg.kd.method != KDMethod::None {
        return Err(Error::Config(format!(
            "train: {what} takes no distillation term"
        )));
    }
    Ok(())
}

fn require_det_labels(samples: &[ImageSample]) -> Result<()> {
    for s in samples {
        if !s.has_detection() {
            return Err(Error::Data(format!(
                "train: sample {} carries no detection labels",
                s.id
            )));
        }
    }
    Ok(())
}

fn require_seg_labels(samples: &[ImageSample]) -> Result<()> {
    for s in samples {
        if !s.has_segmentation() {
            return Err(Error::Data(format!(
                "train: sample {} carries no segmentation mask",
                s.id
            )));
        }
    }
    Ok(())
}

fn require_disjoint(det: &[ImageSample], seg: &[ImageSample]) -> Result<()> {
    let det_ids: HashSet<&str> = det.iter().map(|s| s.id.as_str()).collect();
    for s in seg {
        if det_ids.contains(s.id.as_str()) {
            return Err(Error::Data(format!(
                "train: sample {} appears in both the detection and segmentation splits",
                s.id
            )));
        }
    }
    Ok(())
}

/// Teachers must share the student's pyramid geometry for feature imitation.
fn require_same_scale<S: Scalar>(spec: &ModelSpec, teacher: &Model<S>) -> Result<()> {
    if teacher.spec().scale != spec.scale {
        return Err(Error::Config(format!(
            "train: teacher scale {:?} does not match student scale {:?}",
            teacher.spec().scale,
            spec.scale
        )));
    }
    Ok(())
}

fn init_model<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    cfg: &TrainConfig,
) -> Result<(Model<S>, Option<[u8; 32]>)> {
    match &cfg.pretrain_from {
        None => Ok((build_model(spec, catalog, anchors, cfg.seed)?, None)),
        Some(path) => {
            let loaded = Model::<S>::load(path)?;
            if loaded.spec() != spec {
                return Err(Error::Config(format!(
                    "pretrain checkpoint {} was built for a different architecture",
                    path.display()
                )));
            }
            if loaded.anchor_config() != anchors {
                return Err(Error::Config(format!(
                    "pretrain checkpoint {} uses a different anchor lattice",
                    path.display()
                )));
            }
            if loaded.catalog().digest() != catalog.digest() {
                return Err(Error::Config(format!(
                    "pretrain checkpoint {} detects different classes",
                    path.display()
                )));
            }
            let h = loaded.params().content_hash();
            Ok((loaded, Some(h)))
        }
    }
}

/// Supervised detection on a fully labeled split.
pub fn train_supervised<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::Supervised)?;
    cfg.validate()?;
    require_no_kd(cfg, "supervised training")?;
    require_det_labels(train)?;
    if !spec.with_det() {
        return Err(Error::Config("train: spec has no detection head".into()));
    }
    let (model, ph) = init_model(spec, catalog, anchors, cfg)?;
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Borrowed(train),
                soft_teacher: None,
                mutual_guide: false,
            }),
            seg: None,
            kd_teacher: None,
            val,
        },
        cfg,
        ph,
    )
}

/// Supervised detection with mutual-guide anchor assignment; how teachers are
/// trained before they hand out soft targets.
pub fn train_teacher<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::Supervised)?;
    cfg.validate()?;
    require_no_kd(cfg, "teacher training")?;
    require_det_labels(train)?;
    if !spec.with_det() {
        return Err(Error::Config("train: spec has no detection head".into()));
    }
    let (model, ph) = init_model(spec, catalog, anchors, cfg)?;
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Borrowed(train),
                soft_teacher: None,
                mutual_guide: true,
            }),
            seg: None,
            kd_teacher: None,
            val,
        },
        cfg,
        ph,
    )
}

/// Supervised semantic segmentation on a mask-labeled split; how cross-task
/// teachers come to exist.
pub fn train_segmentation<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::Supervised)?;
    cfg.validate()?;
    require_no_kd(cfg, "segmentation training")?;
    require_seg_labels(train)?;
    if !spec.with_seg() {
        return Err(Error::Config("train: spec has no segmentation head".into()));
    }
    let (model, ph) = init_model(spec, catalog, anchors, cfg)?;
    run(
        model,
        RunPlan {
            det: None,
            seg: Some(train),
            kd_teacher: None,
            val,
        },
        cfg,
        ph,
    )
}

/// Self-training: the student learns from a frozen teacher's dense
/// predictions and never touches the split's own annotations. The student
/// inherits the teacher's classes and anchor lattice.
pub fn train_self<S: Scalar>(
    spec: &ModelSpec,
    teacher: &Model<S>,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::SelfTrain)?;
    cfg.validate()?;
    if !teacher.spec().with_det() {
        return Err(Error::Config(
            "train: self-training teacher has no detection head".into(),
        ));
    }
    if !spec.with_det() {
        return Err(Error::Config("train: spec has no detection head".into()));
    }
    require_same_scale(spec, teacher)?;
    let (model, ph) = init_model(spec, teacher.catalog(), teacher.anchor_config(), cfg)?;
    // Structurally sever the split's labels; the telemetry check then counts
    // any accessor call the loop might ever make.
    let unlabeled: Vec<ImageSample> = train.iter().map(|s| s.unlabeled()).collect();
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Owned(unlabeled),
                soft_teacher: Some(teacher),
                mutual_guide: false,
            }),
            seg: None,
            kd_teacher: (cfg.kd.method != KDMethod::None).then_some(teacher),
            val,
        },
        cfg,
        ph,
    )
}

/// Hard-label detection training that additionally imitates the neck
/// features of a teacher from another task. Disagreement-weighted
/// distillation is impossible here: a segmentation teacher produces no
/// detection predictions to disagree with.
pub fn train_crosstask_kd<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    teacher: &Model<S>,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::CrosstaskKd)?;
    cfg.validate()?;
    if cfg.kd.method == KDMethod::Pdf {
        return Err(Error::Config(
            "train: disagreement-weighted distillation needs detection predictions \
             from both models and cannot run against a cross-task teacher"
                .into(),
        ));
    }
    require_det_labels(train)?;
    if !spec.with_det() {
        return Err(Error::Config("train: spec has no detection head".into()));
    }
    require_same_scale(spec, teacher)?;
    let (model, ph) = init_model(spec, catalog, anchors, cfg)?;
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Borrowed(train),
                soft_teacher: None,
                mutual_guide: false,
            }),
            seg: None,
            kd_teacher: (cfg.kd.method != KDMethod::None).then_some(teacher),
            val,
        },
        cfg,
        ph,
    )
}

/// Alternating multi-task optimization on disjoint single-task splits: a
/// detection mini-batch and a segmentation mini-batch each run forward and
/// backward, then one update applies their summed gradients. An epoch drains
/// the longer split while the shorter one cycles.
pub fn train_multitask<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    det_split: &[ImageSample],
    seg_split: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::Multitask)?;
    cfg.validate()?;
    require_no_kd(cfg, "multitask training")?;
    require_det_labels(det_split)?;
    require_seg_labels(seg_split)?;
    require_disjoint(det_split, seg_split)?;
    if !spec.with_det() || !spec.with_seg() {
        return Err(Error::Config(
            "train: multitask training needs both heads".into(),
        ));
    }
    let (model, ph) = init_model(spec, catalog, anchors, cfg)?;
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Borrowed(det_split),
                soft_teacher: None,
                mutual_guide: false,
            }),
            seg: (!seg_split.is_empty()).then_some(seg_split),
            kd_teacher: None,
            val,
        },
        cfg,
        ph,
    )
}

/// Multi-task training whose detection branch runs on teacher soft targets
/// while the segmentation branch keeps its hard masks. With no masks and no
/// distillation this is exactly self-training.
pub fn train_multitask_selftrain<S: Scalar>(
    spec: &ModelSpec,
    teacher: &Model<S>,
    det_split: &[ImageSample],
    seg_split: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    expect_mode(cfg, TrainMode::MultitaskSelftrain)?;
    cfg.validate()?;
    if !teacher.spec().with_det() {
        return Err(Error::Config(
            "train: self-training teacher has no detection head".into(),
        ));
    }
    if !spec.with_det() {
        return Err(Error::Config("train: spec has no detection head".into()));
    }
    if !seg_split.is_empty() && !spec.with_seg() {
        return Err(Error::Config("train: spec has no segmentation head".into()));
    }
    require_seg_labels(seg_split)?;
    require_disjoint(det_split, seg_split)?;
    require_same_scale(spec, teacher)?;
    let (model, ph) = init_model(spec, teacher.catalog(), teacher.anchor_config(), cfg)?;
    let unlabeled: Vec<ImageSample> = det_split.iter().map(|s| s.unlabeled()).collect();
    run(
        model,
        RunPlan {
            det: Some(DetPlan {
                samples: Samples::Owned(unlabeled),
                soft_teacher: Some(teacher),
                mutual_guide: false,
            }),
            seg: (!seg_split.is_empty()).then_some(seg_split),
            kd_teacher: (cfg.kd.method != KDMethod::None).then_some(teacher),
            val,
        },
        cfg,
        ph,
    )
}
