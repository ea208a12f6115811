//! Detector construction and execution: residual backbones, FPN/PAFPN necks
//! with a global-context block, shared anchor-box heads, a pixel head, and
//! the hand-wired backward pass for all of it.
//!
//! Two scales exist. `Desk` is small enough to train on a CPU and is what
//! every engine runs. `Paper` mirrors the full-size teacher/student pair and
//! exists to make capacity comparisons (parameter counts) honest; it is never
//! forwarded in tests.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, upsample_nearest,
    upsample_nearest_backward,
};
use crate::nn::{Conv2d, Feat, GradBuf, GroupNorm, LayerInfo, LayerKind, ParamReg, ParamSet};
use crate::rng;
use crate::scalar::Scalar;

/// Foreground prior used to bias the classification output so early training
/// is not swamped by background anchors.
pub const CLS_PRIOR: f64 = 0.01;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Deeper and wider; the teacher's backbone.
    Large,
    /// Shallower; the student's backbone.
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    /// Top-down pyramid only.
    Fpn,
    /// Top-down pyramid followed by a bottom-up aggregation path.
    Pafpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Det,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    /// Full-size pair, used for capacity accounting only.
    Paper,
    /// CPU-trainable miniature.
    Desk,
}

impl ScaleKind {
    /// Pyramid strides this scale produces, coarsest last.
    pub fn strides(self) -> &'static [usize] {
        match self {
            ScaleKind::Paper => &[8, 16, 32, 64, 128],
            ScaleKind::Desk => &[8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub neck: NeckKind,
    pub heads: Vec<HeadKind>,
    pub scale: ScaleKind,
    pub head_channels: usize,
    pub head_conv_blocks: usize,
    pub seg_channels: usize,
}

impl ModelSpec {
    /// Large backbone, bottom-up-augmented neck, detection only.
    pub fn teacher(scale: ScaleKind) -> Self {
        Self {
            backbone: BackboneKind::Large,
            neck: NeckKind::Pafpn,
            heads: vec![HeadKind::Det],
            scale,
            head_channels: Self::default_head_channels(scale),
            head_conv_blocks: 2,
            seg_channels: Self::default_seg_channels(scale),
        }
    }

    /// Small backbone, plain pyramid, detection plus segmentation.
    pub fn student(scale: ScaleKind) -> Self {
        Self {
            backbone: BackboneKind::Small,
            neck: NeckKind::Fpn,
            heads: vec![HeadKind::Det, HeadKind::Seg],
            scale,
            head_channels: Self::default_head_channels(scale),
            head_conv_blocks: 2,
            seg_channels: Self::default_seg_channels(scale),
        }
    }

    fn default_head_channels(scale: ScaleKind) -> usize {
        match scale {
            ScaleKind::Paper => 256,
            ScaleKind::Desk => 16,
        }
    }

    fn default_seg_channels(scale: ScaleKind) -> usize {
        match scale {
            ScaleKind::Paper => 128,
            ScaleKind::Desk => 12,
        }
    }

    pub fn with_det(&self) -> bool {
        self.heads.contains(&HeadKind::Det)
    }

    pub fn with_seg(&self) -> bool {
        self.heads.contains(&HeadKind::Seg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("model: at least one head required".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if self.heads[..i].contains(h) {
                return Err(Error::Config(format!("model: duplicate head {h:?}")));
            }
        }
        if self.head_channels == 0 || self.head_conv_blocks == 0 {
            return Err(Error::Config(
                "model: head_channels and head_conv_blocks must be positive".into(),
            ));
        }
        if self.with_seg() && self.seg_channels == 0 {
            return Err(Error::Config("model: seg_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor-grid description. Per cell the anchor set is the cross product of
/// `scales` and `aspect_ratios`; box size is `stride * scale`, stretched by
/// the ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn desk() -> Self {
        Self {
            strides: vec![8, 16, 32],
            scales: vec![2.0, 3.2],
            aspect_ratios: vec![1.0],
        }
    }

    pub fn paper() -> Self {
        Self {
            strides: vec![8, 16, 32, 64, 128],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }

    pub fn for_scale(scale: ScaleKind) -> Self {
        match scale {
            ScaleKind::Paper => Self::paper(),
            ScaleKind::Desk => Self::desk(),
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchors: empty stride/scale/ratio list".into()));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("anchors: strides must be increasing".into()));
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|&v| v <= 0.0) {
            return Err(Error::Config("anchors: scales and ratios must be positive".into()));
        }
        Ok(())
    }

    /// Total anchors for an image of the given size.
    pub fn count(&self, height: usize, width: usize) -> Result<usize> {
        self.grid_sizes(height, width)
            .map(|g| g.iter().map(|&(h, w)| h * w * self.anchors_per_cell()).sum())
    }

    /// Pyramid grid sizes, checking stride divisibility.
    pub fn grid_sizes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let coarsest = *self.strides.last().unwrap();
        if height == 0 || width == 0 || height % coarsest != 0 || width % coarsest != 0 {
            return Err(Error::Input(format!(
                "image {width}x{height} not divisible by coarsest stride {coarsest}"
            )));
        }
        Ok(self
            .strides
            .iter()
            .map(|s| (height / s, width / s))
            .collect())
    }

    /// All anchor boxes in output order: level, then row, then column, then
    /// the per-cell anchor index (scale-major).
    pub fn generate<S: Scalar>(&self, height: usize, width: usize) -> Result<Vec<Box2<S>>> {
        self.validate()?;
        let grids = self.grid_sizes(height, width)?;
        let mut out = Vec::with_capacity(self.count(height, width)?);
        for (level, &stride) in self.strides.iter().enumerate() {
            let (gh, gw) = grids[level];
            let s = stride as f64;
            for i in 0..gh {
                for j in 0..gw {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    for &scale in &self.scales {
                        for &ratio in &self.aspect_ratios {
                            let w = s * scale / ratio.sqrt();
                            let h = s * scale * ratio.sqrt();
                            out.push(Box2::new(
                                S::from_f64(cx - w / 2.0),
                                S::from_f64(cy - h / 2.0),
                                S::from_f64(cx + w / 2.0),
                                S::from_f64(cy + h / 2.0),
                            ));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Flattened per-anchor detector outputs. Row order matches
/// [`AnchorConfig::generate`]: level, row, column, per-cell anchor.
#[derive(Debug, Clone)]
pub struct DetectionOutput<S> {
    /// `(N_anchors, classes)` logits.
    pub cls: Array2<S>,
    /// `(N_anchors, 4)` box deltas.
    pub reg: Array2<S>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput<S> {
    pub det: Option<DetectionOutput<S>>,
    /// Per-level classification maps `(A*C, h, w)`, kept for losses that
    /// weight by teacher/student disagreement.
    pub cls_maps: Vec<Feat<S>>,
    /// `(seg_classes, H, W)` logits at input resolution.
    pub seg: Option<Feat<S>>,
    /// Final neck features per level, the imitation surface.
    pub pyramid: Vec<Feat<S>>,
}

/// Gradients flowing back into a forward pass, one slot per output.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad<S> {
    pub cls: Option<Array2<S>>,
    pub reg: Option<Array2<S>>,
    pub seg: Option<Feat<S>>,
    pub pyramid: Option<Vec<Feat<S>>>,
}

// ---------------------------------------------------------------------------
// building blocks

/// Conv optionally followed by GroupNorm and ReLU. Bias is used exactly when
/// there is no norm.
struct ConvUnit {
    conv: Conv2d,
    gn: Option<GroupNorm>,
    act: bool,
}

struct UnitTrace<S> {
    x: Feat<S>,
    conv_out: Option<Feat<S>>,
    act_in: Option<Feat<S>>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        norm: bool,
        act: bool,
    ) -> Self {
        let conv = Conv2d::new(reg, name, in_ch, out_ch, k, stride, k / 2, !norm);
        let gn = norm.then(|| GroupNorm::new(reg, &format!("{name}.gn"), out_ch));
        if act {
            reg.note_layer(&format!("{name}.relu"), LayerKind::Relu);
        }
        Self { conv, gn, act }
    }

    fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Feat<S>) -> (Feat<S>, UnitTrace<S>) {
        let c = self.conv.forward(ps, x);
        let (n, conv_out) = match &self.gn {
            Some(gn) => (gn.forward(ps, &c), Some(c)),
            None => (c, None),
        };
        let (y, act_in) = if self.act {
            (relu(&n), Some(n))
        } else {
            (n, None)
        };
        let tr = UnitTrace {
            x: x.clone(),
            conv_out,
            act_in,
        };
        (y, tr)
    }

    fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &UnitTrace<S>,
        gy: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        let g = if self.act {
            relu_backward(tr.act_in.as_ref().unwrap(), gy)
        } else {
            gy.clone()
        };
        let g = match &self.gn {
            Some(gn) => gn.backward(ps, tr.conv_out.as_ref().unwrap(), &g, grads),
            None => g,
        };
        self.conv.backward(ps, &tr.x, &g, grads)
    }
}

/// Residual block: two (or three, when an inner channel is given) norm-act
/// convs plus a skip connection, ReLU after the sum.
struct Block {
    units: Vec<ConvUnit>,
    shortcut: Option<ConvUnit>,
}

struct BlockTrace<S> {
    units: Vec<UnitTrace<S>>,
    shortcut: Option<UnitTrace<S>>,
    sum: Feat<S>,
}

impl Block {
    fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        inner_ch: Option<usize>,
        stride: usize,
    ) -> Self {
        let units = match inner_ch {
            None => vec![
                ConvUnit::new(reg, &format!("{name}.c1"), in_ch, out_ch, 3, stride, true, true),
                ConvUnit::new(reg, &format!("{name}.c2"), out_ch, out_ch, 3, 1, true, false),
            ],
            Some(m) => vec![
                ConvUnit::new(reg, &format!("{name}.c1"), in_ch, m, 1, 1, true, true),
                ConvUnit::new(reg, &format!("{name}.c2"), m, m, 3, stride, true, true),
                ConvUnit::new(reg, &format!("{name}.c3"), m, out_ch, 1, 1, true, false),
            ],
        };
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            ConvUnit::new(reg, &format!("{name}.sc"), in_ch, out_ch, 1, stride, true, false)
        });
        reg.note_layer(&format!("{name}.add"), LayerKind::Add);
        reg.note_layer(&format!("{name}.relu"), LayerKind::Relu);
        Self { units, shortcut }
    }

    fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Feat<S>) -> (Feat<S>, BlockTrace<S>) {
        let mut traces = Vec::with_capacity(self.units.len());
        let mut z = x.clone();
        for u in &self.units {
            let (y, tr) = u.forward(ps, &z);
            traces.push(tr);
            z = y;
        }
        let (sc, sc_trace) = match &self.shortcut {
            Some(u) => {
                let (y, tr) = u.forward(ps, x);
                (y, Some(tr))
            }
            None => (x.clone(), None),
        };
        let sum = z + sc;
        let y = relu(&sum);
        (
            y,
            BlockTrace {
                units: traces,
                shortcut: sc_trace,
                sum,
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &BlockTrace<S>,
        gy: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        let g_sum = relu_backward(&tr.sum, gy);
        let mut g = g_sum.clone();
        for (u, ut) in self.units.iter().zip(&tr.units).rev() {
            g = u.backward(ps, ut, &g, grads);
        }
        let g_sc = match (&self.shortcut, &tr.shortcut) {
            (Some(u), Some(ut)) => u.backward(ps, ut, &g_sum, grads),
            _ => g_sum,
        };
        g + g_sc
    }
}

struct StagePlan {
    blocks: usize,
    out_ch: usize,
    inner_ch: Option<usize>,
}

struct BackbonePlan {
    stem: Vec<(usize, usize, usize)>, // (out_ch, kernel, stride)
    stages: Vec<StagePlan>,
    /// How many trailing stages feed the neck.
    taps: usize,
}

/// All backbones downsample with strided convolutions only; there is no
/// pooling before the residual stages, and every stage trains from scratch.
fn backbone_plan(kind: BackboneKind, scale: ScaleKind) -> BackbonePlan {
    let stage = |blocks, out_ch, inner_ch| StagePlan {
        blocks,
        out_ch,
        inner_ch,
    };
    match (scale, kind) {
        (ScaleKind::Paper, BackboneKind::Large) => BackbonePlan {
            stem: vec![(64, 7, 2)],
            stages: vec![
                stage(3, 256, Some(64)),
                stage(4, 512, Some(128)),
                stage(6, 1024, Some(256)),
                stage(3, 2048, Some(512)),
            ],
            taps: 3,
        },
        (ScaleKind::Paper, BackboneKind::Small) => BackbonePlan {
            stem: vec![(64, 7, 2)],
            stages: vec![
                stage(2, 64, None),
                stage(2, 128, None),
                stage(2, 256, None),
                stage(2, 512, None),
            ],
            taps: 3,
        },
        (ScaleKind::Desk, BackboneKind::Large) => BackbonePlan {
            stem: vec![(12, 3, 2), (18, 3, 1)],
            stages: vec![
                stage(2, 18, None),
                stage(2, 24, None),
                stage(2, 36, None),
                stage(2, 48, None),
            ],
            taps: 3,
        },
        (ScaleKind::Desk, BackboneKind::Small) => BackbonePlan {
            stem: vec![(8, 3, 2), (16, 3, 1)],
            stages: vec![
                stage(1, 16, None),
                stage(1, 16, None),
                stage(1, 24, None),
                stage(1, 32, None),
            ],
            taps: 3,
        },
    }
}

struct Backbone {
    stem: Vec<ConvUnit>,
    stages: Vec<Vec<Block>>,
    taps: usize,
    tap_channels: Vec<usize>,
}

struct BackboneTrace<S> {
    stem: Vec<UnitTrace<S>>,
    blocks: Vec<Vec<BlockTrace<S>>>,
}

impl Backbone {
    fn new<S: Scalar>(reg: &mut ParamReg<S>, plan: &BackbonePlan) -> Self {
        let mut ch = 3;
        let mut stem = Vec::new();
        for (i, &(out_ch, k, stride)) in plan.stem.iter().enumerate() {
            stem.push(ConvUnit::new(
                reg,
                &format!("backbone.stem{i}"),
                ch,
                out_ch,
                k,
                stride,
                true,
                true,
            ));
            ch = out_ch;
        }
        let mut stages = Vec::new();
        for (si, sp) in plan.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..sp.blocks {
                let stride = if bi == 0 { 2 } else { 1 };
                let in_ch = if bi == 0 { ch } else { sp.out_ch };
                blocks.push(Block::new(
                    reg,
                    &format!("backbone.s{si}.b{bi}"),
                    in_ch,
                    sp.out_ch,
                    sp.inner_ch,
                    stride,
                ));
            }
            ch = sp.out_ch;
            stages.push(blocks);
        }
        let tap_channels = plan.stages[plan.stages.len() - plan.taps..]
            .iter()
            .map(|s| s.out_ch)
            .collect();
        Self {
            stem,
            stages,
            taps: plan.taps,
            tap_channels,
        }
    }

    fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Feat<S>,
    ) -> (Vec<Feat<S>>, BackboneTrace<S>) {
        let mut stem_tr = Vec::new();
        let mut z = x.clone();
        for u in &self.stem {
            let (y, tr) = u.forward(ps, &z);
            stem_tr.push(tr);
            z = y;
        }
        let mut taps = Vec::new();
        let mut block_tr = Vec::new();
        let first_tap = self.stages.len() - self.taps;
        for (si, stage) in self.stages.iter().enumerate() {
            let mut stage_tr = Vec::new();
            for b in stage {
                let (y, tr) = b.forward(ps, &z);
                stage_tr.push(tr);
                z = y;
            }
            block_tr.push(stage_tr);
            if si >= first_tap {
                taps.push(z.clone());
            }
        }
        (
            taps,
            BackboneTrace {
                stem: stem_tr,
                blocks: block_tr,
            },
        )
    }

    /// `tap_grads` aligns with the forward taps (coarsest last).
    fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &BackboneTrace<S>,
        tap_grads: Vec<Feat<S>>,
        grads: &mut GradBuf<S>,
    ) {
        let first_tap = self.stages.len() - self.taps;
        let mut tap_grads = tap_grads;
        let mut g: Option<Feat<S>> = None;
        for si in (0..self.stages.len()).rev() {
            if si >= first_tap {
                let tg = tap_grads.pop().unwrap();
                g = Some(match g {
                    Some(acc) => acc + tg,
                    None => tg,
                });
            }
            let mut cur = g.take().unwrap();
            for (b, bt) in self.stages[si].iter().zip(&tr.blocks[si]).rev() {
                cur = b.backward(ps, bt, &cur, grads);
            }
            g = Some(cur);
        }
        let mut cur = g.unwrap();
        for (u, ut) in self.stem.iter().zip(&tr.stem).rev() {
            cur = u.backward(ps, ut, &cur, grads);
        }
    }
}

/// Pyramid neck. Lateral 1x1 convs and top-down fusion produce one map per
/// backbone tap; at paper scale two extra strided convs extend the pyramid.
/// `Pafpn` adds a bottom-up pass. A global-context vector (pooled from the
/// deepest backbone map) is projected and added to every level.
struct Neck {
    kind: NeckKind,
    laterals: Vec<Conv2d>,
    outs: Vec<Conv2d>,
    extras: Vec<Conv2d>,
    pa_down: Vec<Conv2d>,
    context: Conv2d,
    channels: usize,
}

struct NeckTrace<S> {
    taps: Vec<Feat<S>>,
    topdown: Vec<Feat<S>>,
    fpn_outs: Vec<Feat<S>>,
    extra_relu_in: Vec<Feat<S>>,
    pa_in: Vec<Feat<S>>,
    context_in: Feat<S>,
}

impl Neck {
    fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        kind: NeckKind,
        tap_channels: &[usize],
        channels: usize,
        n_extra: usize,
    ) -> Self {
        let laterals = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(reg, &format!("neck.lat{i}"), c, channels, 1, 1, 0, true))
            .collect();
        let outs = (0..tap_channels.len())
            .map(|i| Conv2d::new(reg, &format!("neck.out{i}"), channels, channels, 3, 1, 1, true))
            .collect();
        let extras: Vec<Conv2d> = (0..n_extra)
            .map(|i| {
                if i > 0 {
                    reg.note_layer(&format!("neck.extra{i}.relu"), LayerKind::Relu);
                }
                Conv2d::new(reg, &format!("neck.extra{i}"), channels, channels, 3, 2, 1, true)
            })
            .collect();
        let n_levels = tap_channels.len() + n_extra;
        let pa_down = match kind {
            NeckKind::Fpn => Vec::new(),
            NeckKind::Pafpn => (1..n_levels)
                .map(|i| Conv2d::new(reg, &format!("neck.pa{i}"), channels, channels, 3, 2, 1, true))
                .collect(),
        };
        reg.note_layer("neck.context.pool", LayerKind::GlobalAvgPool);
        let context = Conv2d::new(
            reg,
            "neck.context",
            *tap_channels.last().unwrap(),
            channels,
            1,
            1,
            0,
            true,
        );
        for i in 0..tap_channels.len().saturating_sub(1) {
            reg.note_layer(&format!("neck.up{i}"), LayerKind::UpsampleNearest);
        }
        Self {
            kind,
            laterals,
            outs,
            extras,
            pa_down,
            context,
            channels,
        }
    }

    fn n_levels(&self) -> usize {
        self.laterals.len() + self.extras.len()
    }

    fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        taps: &[Feat<S>],
    ) -> (Vec<Feat<S>>, NeckTrace<S>) {
        let nl = self.laterals.len();
        let lats: Vec<Feat<S>> = (0..nl)
            .map(|i| self.laterals[i].forward(ps, &taps[i]))
            .collect();
        let mut topdown = lats;
        for i in (0..nl - 1).rev() {
            let up = upsample_nearest(&topdown[i + 1], 2);
            topdown[i] = &topdown[i] + &up;
        }
        let mut pyramid: Vec<Feat<S>> = (0..nl)
            .map(|i| self.outs[i].forward(ps, &topdown[i]))
            .collect();
        let mut extra_relu_in = Vec::new();
        for (i, conv) in self.extras.iter().enumerate() {
            let src = if i == 0 {
                pyramid[nl - 1].clone()
            } else {
                let pre = pyramid.last().unwrap().clone();
                extra_relu_in.push(pre.clone());
                relu(&pre)
            };
            pyramid.push(conv.forward(ps, &src));
        }
        let fpn_outs = pyramid.clone();
        let mut pa_in = Vec::new();
        if self.kind == NeckKind::Pafpn {
            for i in 1..pyramid.len() {
                pa_in.push(pyramid[i - 1].clone());
                let down = self.pa_down[i - 1].forward(ps, &pyramid[i - 1]);
                pyramid[i] = &pyramid[i] + &down;
            }
        }
        let deepest = taps.last().unwrap();
        let pooled = global_avg_pool(deepest);
        let context_in = Feat::from_shape_vec((deepest.dim().0, 1, 1), pooled).unwrap();
        let ctx = self.context.forward(ps, &context_in);
        for level in pyramid.iter_mut() {
            for c in 0..self.channels {
                let add = ctx[(c, 0, 0)];
                level.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v + add);
            }
        }
        let tr = NeckTrace {
            taps: taps.to_vec(),
            topdown,
            fpn_outs,
            extra_relu_in,
            pa_in,
            context_in,
        };
        (pyramid, tr)
    }

    /// Returns gradients for the backbone taps.
    fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &NeckTrace<S>,
        pyramid_grads: Vec<Feat<S>>,
        grads: &mut GradBuf<S>,
    ) -> Vec<Feat<S>> {
        let nl = self.laterals.len();
        let n_levels = self.n_levels();
        assert_eq!(pyramid_grads.len(), n_levels);

        // context add: gradient wrt the context vector is the spatial sum
        let mut ctx_grad = Feat::zeros((self.channels, 1, 1));
        for g in &pyramid_grads {
            for c in 0..self.channels {
                ctx_grad[(c, 0, 0)] += g.index_axis(ndarray::Axis(0), c).sum();
            }
        }
        let g_pooled = self.context.backward(ps, &tr.context_in, &ctx_grad, grads);
        let deepest = tr.taps.last().unwrap();
        let pooled_vec: Vec<S> = g_pooled.iter().copied().collect();
        let mut g_deepest_ctx = global_avg_pool_backward(&pooled_vec, deepest.dim());

        let mut g_fpn = pyramid_grads;
        if self.kind == NeckKind::Pafpn {
            for i in (1..n_levels).rev() {
                let gd = self.pa_down[i - 1].backward(ps, &tr.pa_in[i - 1], &g_fpn[i], grads);
                g_fpn[i - 1] = &g_fpn[i - 1] + &gd;
            }
        }
        for i in (0..self.extras.len()).rev() {
            let g_extra = g_fpn.pop().unwrap();
            let src = if i == 0 {
                tr.fpn_outs[nl - 1].clone()
            } else {
                relu(&tr.extra_relu_in[i - 1])
            };
            let mut g_src = self.extras[i].backward(ps, &src, &g_extra, grads);
            if i > 0 {
                g_src = relu_backward(&tr.extra_relu_in[i - 1], &g_src);
                let last = g_fpn.len() - 1;
                g_fpn[last] = &g_fpn[last] + &g_src;
            } else {
                g_fpn[nl - 1] = &g_fpn[nl - 1] + &g_src;
            }
        }
        let mut g_td: Vec<Feat<S>> = (0..nl)
            .map(|i| self.outs[i].backward(ps, &tr.topdown[i], &g_fpn[i], grads))
            .collect();
        for i in 0..nl - 1 {
            let gu = upsample_nearest_backward(&g_td[i], 2);
            g_td[i + 1] = &g_td[i + 1] + &gu;
        }
        let mut tap_grads: Vec<Feat<S>> = (0..nl)
            .map(|i| self.laterals[i].backward(ps, &tr.taps[i], &g_td[i], grads))
            .collect();
        g_deepest_ctx = &g_deepest_ctx + &tap_grads[nl - 1];
        tap_grads[nl - 1] = g_deepest_ctx;
        tap_grads
    }
}

/// Shared detection head: parallel classification and regression towers
/// applied to every pyramid level.
struct RetinaHead {
    cls_tower: Vec<ConvUnit>,
    reg_tower: Vec<ConvUnit>,
    cls_out: Conv2d,
    reg_out: Conv2d,
}

struct HeadLevelTrace<S> {
    cls_units: Vec<UnitTrace<S>>,
    reg_units: Vec<UnitTrace<S>>,
    cls_out_in: Feat<S>,
    reg_out_in: Feat<S>,
}

impl RetinaHead {
    fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        in_ch: usize,
        head_ch: usize,
        blocks: usize,
        anchors_per_cell: usize,
        classes: usize,
    ) -> Self {
        let tower = |reg: &mut ParamReg<S>, tag: &str| -> Vec<ConvUnit> {
            (0..blocks)
                .map(|i| {
                    let ic = if i == 0 { in_ch } else { head_ch };
                    ConvUnit::new(reg, &format!("head.{tag}{i}"), ic, head_ch, 3, 1, true, true)
                })
                .collect()
        };
        let cls_tower = tower(reg, "cls");
        let reg_tower = tower(reg, "reg");
        let cls_out = Conv2d::new(
            reg,
            "head.cls_out",
            head_ch,
            anchors_per_cell * classes,
            3,
            1,
            1,
            true,
        );
        let reg_out =
            Conv2d::new(reg, "head.reg_out", head_ch, anchors_per_cell * 4, 3, 1, 1, true);
        // bias the logits toward background so early loss stays finite
        let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let b = cls_out.b.unwrap();
        for v in reg.params.slice_mut(b) {
            *v = S::from_f64(bias);
        }
        Self {
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
        }
    }

    fn forward_level<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        f: &Feat<S>,
    ) -> (Feat<S>, Feat<S>, HeadLevelTrace<S>) {
        let mut z = f.clone();
        let mut cls_units = Vec::new();
        for u in &self.cls_tower {
            let (y, tr) = u.forward(ps, &z);
            cls_units.push(tr);
            z = y;
        }
        let cls_out_in = z;
        let cls_map = self.cls_out.forward(ps, &cls_out_in);

        let mut z = f.clone();
        let mut reg_units = Vec::new();
        for u in &self.reg_tower {
            let (y, tr) = u.forward(ps, &z);
            reg_units.push(tr);
            z = y;
        }
        let reg_out_in = z;
        let reg_map = self.reg_out.forward(ps, &reg_out_in);
        (
            cls_map,
            reg_map,
            HeadLevelTrace {
                cls_units,
                reg_units,
                cls_out_in,
                reg_out_in,
            },
        )
    }

    fn backward_level<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &HeadLevelTrace<S>,
        g_cls_map: &Feat<S>,
        g_reg_map: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        let mut g = self.cls_out.backward(ps, &tr.cls_out_in, g_cls_map, grads);
        for (u, ut) in self.cls_tower.iter().zip(&tr.cls_units).rev() {
            g = u.backward(ps, ut, &g, grads);
        }
        let mut gr = self.reg_out.backward(ps, &tr.reg_out_in, g_reg_map, grads);
        for (u, ut) in self.reg_tower.iter().zip(&tr.reg_units).rev() {
            gr = u.backward(ps, ut, &gr, grads);
        }
        g + gr
    }
}

/// Pixel-labeling head: every pyramid level is convolved and upsampled in
/// steps of two until it reaches quarter resolution, the results are summed,
/// projected to class logits and upsampled to the input size.
struct SegHead {
    chains: Vec<Vec<ConvUnit>>,
    out: Conv2d,
}

struct SegTrace<S> {
    chain_units: Vec<Vec<UnitTrace<S>>>,
    out_in: Feat<S>,
}

impl SegHead {
    fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        in_ch: usize,
        seg_ch: usize,
        strides: &[usize],
        classes: usize,
    ) -> Self {
        let chains = strides
            .iter()
            .enumerate()
            .map(|(li, &s)| {
                let ups = (s / 4).ilog2() as usize;
                (0..ups.max(1))
                    .map(|i| {
                        let ic = if i == 0 { in_ch } else { seg_ch };
                        let u = ConvUnit::new(
                            reg,
                            &format!("seg.l{li}.c{i}"),
                            ic,
                            seg_ch,
                            3,
                            1,
                            true,
                            true,
                        );
                        if i < ups {
                            reg.note_layer(&format!("seg.l{li}.up{i}"), LayerKind::UpsampleNearest);
                        }
                        u
                    })
                    .collect()
            })
            .collect();
        let out = Conv2d::new(reg, "seg.out", seg_ch, classes, 1, 1, 0, true);
        reg.note_layer("seg.up_final", LayerKind::UpsampleNearest);
        Self { chains, out }
    }

    fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        pyramid: &[Feat<S>],
        strides: &[usize],
    ) -> (Feat<S>, SegTrace<S>) {
        let mut summed: Option<Feat<S>> = None;
        let mut chain_units = Vec::new();
        for (li, chain) in self.chains.iter().enumerate() {
            let ups = (strides[li] / 4).ilog2() as usize;
            let mut z = pyramid[li].clone();
            let mut units = Vec::new();
            for (i, u) in chain.iter().enumerate() {
                let (y, tr) = u.forward(ps, &z);
                units.push(tr);
                z = if i < ups { upsample_nearest(&y, 2) } else { y };
            }
            chain_units.push(units);
            summed = Some(match summed {
                Some(acc) => acc + z,
                None => z,
            });
        }
        let out_in = summed.unwrap();
        let logits_q = self.out.forward(ps, &out_in);
        let logits = upsample_nearest(&logits_q, 4);
        (logits, SegTrace { chain_units, out_in })
    }

    fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tr: &SegTrace<S>,
        g_logits: &Feat<S>,
        strides: &[usize],
        grads: &mut GradBuf<S>,
    ) -> Vec<Feat<S>> {
        let g_q = upsample_nearest_backward(g_logits, 4);
        let g_sum = self.out.backward(ps, &tr.out_in, &g_q, grads);
        let mut level_grads = Vec::new();
        for (li, chain) in self.chains.iter().enumerate() {
            let ups = (strides[li] / 4).ilog2() as usize;
            let mut g = g_sum.clone();
            for (i, u) in chain.iter().enumerate().rev() {
                if i < ups {
                    g = upsample_nearest_backward(&g, 2);
                }
                g = u.backward(ps, &tr.chain_units[li][i], &g, grads);
            }
            level_grads.push(g);
        }
        level_grads
    }
}

// ---------------------------------------------------------------------------
// the model

pub struct Model<S: Scalar> {
    spec: ModelSpec,
    anchors: AnchorConfig,
    catalog: ClassCatalog,
    params: ParamSet<S>,
    layers: Vec<LayerInfo>,
    backbone: Backbone,
    neck: Neck,
    det_head: Option<RetinaHead>,
    seg_head: Option<SegHead>,
}

/// Every intermediate needed to run the backward pass for one image.
pub struct ModelTrace<S> {
    backbone: BackboneTrace<S>,
    neck: NeckTrace<S>,
    head_levels: Vec<HeadLevelTrace<S>>,
    seg: Option<SegTrace<S>>,
    grid_sizes: Vec<(usize, usize)>,
}

/// Seg-head chains assume pyramid strides reach down to 4 after halvings.
pub fn neck_channels(spec: &ModelSpec) -> usize {
    match (spec.scale, spec.backbone) {
        (ScaleKind::Paper, _) => 256,
        (ScaleKind::Desk, BackboneKind::Large) => 24,
        (ScaleKind::Desk, BackboneKind::Small) => 16,
    }
}

pub fn build_model<S: Scalar>(
    spec: &ModelSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorConfig,
    seed: u64,
) -> Result<Model<S>> {
    spec.validate()?;
    anchors.validate()?;
    if anchors.strides != spec.scale.strides() {
        return Err(Error::Config(format!(
            "anchor strides {:?} do not match {:?}-scale pyramid {:?}",
            anchors.strides,
            spec.scale,
            spec.scale.strides()
        )));
    }
    let mut params = ParamSet::new();
    let mut layers = Vec::new();
    let mut init_rng = rng::stream(seed, "model-init");
    let mut reg = ParamReg {
        params: &mut params,
        rng: &mut init_rng,
        layers: &mut layers,
    };
    let plan = backbone_plan(spec.backbone, spec.scale);
    let backbone = Backbone::new(&mut reg, &plan);
    let n_extra = spec.scale.strides().len() - plan.taps;
    let nch = neck_channels(spec);
    let neck = Neck::new(&mut reg, spec.neck, &backbone.tap_channels, nch, n_extra);
    let det_head = spec.with_det().then(|| {
        RetinaHead::new(
            &mut reg,
            nch,
            spec.head_channels,
            spec.head_conv_blocks,
            anchors.anchors_per_cell(),
            catalog.len(),
        )
    });
    let seg_head = spec.with_seg().then(|| {
        SegHead::new(
            &mut reg,
            nch,
            spec.seg_channels,
            spec.scale.strides(),
            catalog.seg_classes(),
        )
    });
    Ok(Model {
        spec: spec.clone(),
        anchors: anchors.clone(),
        catalog: catalog.clone(),
        params,
        layers,
        backbone,
        neck,
        det_head,
        seg_head,
    })
}

impl<S: Scalar> Model<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn anchor_config(&self) -> &AnchorConfig {
        &self.anchors
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }

    /// Anchor boxes for an input of this size, in output row order.
    pub fn anchors_for(&self, height: usize, width: usize) -> Result<Vec<Box2<S>>> {
        self.anchors.generate(height, width)
    }

    pub fn forward(&self, image: &Feat<S>) -> Result<ModelOutput<S>> {
        self.forward_traced(image).map(|(out, _)| out)
    }

    pub fn forward_traced(&self, image: &Feat<S>) -> Result<(ModelOutput<S>, ModelTrace<S>)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Input(format!("expected 3-channel input, got {c}")));
        }
        let grid_sizes = self.anchors.grid_sizes(h, w)?;
        let (taps, backbone_tr) = self.backbone.forward(&self.params, image);
        let (pyramid, neck_tr) = self.neck.forward(&self.params, &taps);
        debug_assert_eq!(pyramid.len(), grid_sizes.len());

        let mut cls_maps = Vec::new();
        let mut reg_maps = Vec::new();
        let mut head_levels = Vec::new();
        let det = if let Some(head) = &self.det_head {
            for f in &pyramid {
                let (cm, rm, tr) = head.forward_level(&self.params, f);
                cls_maps.push(cm);
                reg_maps.push(rm);
                head_levels.push(tr);
            }
            Some(flatten_maps(
                &cls_maps,
                &reg_maps,
                self.anchors.anchors_per_cell(),
                self.catalog.len(),
            ))
        } else {
            None
        };
        let (seg, seg_tr) = match &self.seg_head {
            Some(sh) => {
                let (logits, tr) = sh.forward(&self.params, &pyramid, &self.anchors.strides);
                (Some(logits), Some(tr))
            }
            None => (None, None),
        };
        let output = ModelOutput {
            det,
            cls_maps,
            seg,
            pyramid,
        };
        let trace = ModelTrace {
            backbone: backbone_tr,
            neck: neck_tr,
            head_levels,
            seg: seg_tr,
            grid_sizes,
        };
        Ok((output, trace))
    }

    /// Accumulate parameter gradients for one image. Output gradients that
    /// are `None` contribute nothing.
    pub fn backward(
        &self,
        trace: &ModelTrace<S>,
        grad: &OutputGrad<S>,
        grads: &mut GradBuf<S>,
    ) -> Result<()> {
        let levels = trace.grid_sizes.len();
        let a = self.anchors.anchors_per_cell();
        let classes = self.catalog.len();
        let mut pyr_grads: Vec<Feat<S>> = trace
            .grid_sizes
            .iter()
            .map(|&(gh, gw)| Feat::zeros((self.neck.channels, gh, gw)))
            .collect();

        if grad.cls.is_some() || grad.reg.is_some() {
            let head = self
                .det_head
                .as_ref()
                .ok_or_else(|| Error::Config("detection gradient for a model without a detection head".into()))?;
            let n_anchors: usize = trace.grid_sizes.iter().map(|&(h, w)| h * w * a).sum();
            for g in [grad.cls.as_ref().map(|g| (g, classes)), grad.reg.as_ref().map(|g| (g, 4))]
                .into_iter()
                .flatten()
            {
                if g.0.dim() != (n_anchors, g.1) {
                    return Err(Error::Input(format!(
                        "detection gradient shape {:?}, expected ({n_anchors}, {})",
                        g.0.dim(),
                        g.1
                    )));
                }
            }
            let zeros_cls = Array2::zeros((n_anchors, classes));
            let zeros_reg = Array2::zeros((n_anchors, 4));
            let g_cls = grad.cls.as_ref().unwrap_or(&zeros_cls);
            let g_reg = grad.reg.as_ref().unwrap_or(&zeros_reg);
            let cls_maps = unflatten_rows(g_cls, &trace.grid_sizes, a, classes);
            let reg_maps = unflatten_rows(g_reg, &trace.grid_sizes, a, 4);
            for li in 0..levels {
                let g = head.backward_level(
                    &self.params,
                    &trace.head_levels[li],
                    &cls_maps[li],
                    &reg_maps[li],
                    grads,
                );
                pyr_grads[li] = &pyr_grads[li] + &g;
            }
        }
        if let Some(gs) = &grad.seg {
            let (sh, tr) = match (&self.seg_head, &trace.seg) {
                (Some(sh), Some(tr)) => (sh, tr),
                _ => {
                    return Err(Error::Config(
                        "segmentation gradient for a model without a pixel head".into(),
                    ))
                }
            };
            let lg = sh.backward(&self.params, tr, gs, &self.anchors.strides, grads);
            for (acc, g) in pyr_grads.iter_mut().zip(lg) {
                *acc = &*acc + &g;
            }
        }
        if let Some(pg) = &grad.pyramid {
            if pg.len() != levels {
                return Err(Error::Input(format!(
                    "pyramid gradient has {} levels, expected {levels}",
                    pg.len()
                )));
            }
            for (acc, g) in pyr_grads.iter_mut().zip(pg) {
                *acc = &*acc + g;
            }
        }
        let tap_grads = self
            .neck
            .backward(&self.params, &trace.neck, pyr_grads, grads);
        self.backbone
            .backward(&self.params, &trace.backbone, tap_grads, grads);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            anchors: self.anchors.clone(),
            classes: self.catalog.names().to_vec(),
            entries: self
                .params
                .entries()
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        f.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        f.write_all(&header_json).map_err(io_err)?;
        for v in self.params.data() {
            f.write_all(&v.as_f64().to_le_bytes()).map_err(io_err)?;
        }
        f.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model<S>> {
        let corrupt = |msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        let io_err = |e: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8).map_err(io_err)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)
            .map_err(|_| corrupt("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hbuf).map_err(|e| corrupt(format!("header: {e}")))?;
        let catalog = ClassCatalog::new(header.classes.clone())?;
        let mut model: Model<S> = build_model(&header.spec, &catalog, &header.anchors, 0)?;
        let mut entries_ok = model.params.entries().len() == header.entries.len();
        if entries_ok {
            for (have, want) in model.params.entries().iter().zip(&header.entries) {
                if have.name != want.name || have.shape != want.shape {
                    entries_ok = false;
                    break;
                }
            }
        }
        if !entries_ok {
            return Err(corrupt("parameter table does not match the spec".into()));
        }
        let n = model.params.data().len();
        let mut raw = vec![0u8; n * 8];
        f.read_exact(&mut raw)
            .map_err(|_| corrupt("truncated parameter data".into()))?;
        let mut extra = [0u8; 1];
        if f.read(&mut extra).map_err(io_err)? != 0 {
            return Err(corrupt("trailing bytes after parameter data".into()));
        }
        for (i, v) in model.params.data_mut().iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&raw[i * 8..i * 8 + 8]);
            *v = S::from_f64(f64::from_le_bytes(b));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    anchors: AnchorConfig,
    classes: Vec<String>,
    entries: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Flatten per-level head maps into `(N, C)` rows ordered level, row,
/// column, per-cell anchor.
fn flatten_maps<S: Scalar>(
    cls_maps: &[Feat<S>],
    reg_maps: &[Feat<S>],
    a: usize,
    classes: usize,
) -> DetectionOutput<S> {
    let n: usize = cls_maps.iter().map(|m| m.dim().1 * m.dim().2 * a).sum();
    let mut cls = Array2::zeros((n, classes));
    let mut reg = Array2::zeros((n, 4));
    let mut row = 0;
    for (cm, rm) in cls_maps.iter().zip(reg_maps) {
        let (_, h, w) = cm.dim();
        for i in 0..h {
            for j in 0..w {
                for ai in 0..a {
                    for c in 0..classes {
                        cls[(row, c)] = cm[(ai * classes + c, i, j)];
                    }
                    for k in 0..4 {
                        reg[(row, k)] = rm[(ai * 4 + k, i, j)];
                    }
                    row += 1;
                }
            }
        }
    }
    DetectionOutput { cls, reg }
}

/// Inverse of [`flatten_maps`] for gradients.
fn unflatten_rows<S: Scalar>(
    rows: &Array2<S>,
    grid_sizes: &[(usize, usize)],
    a: usize,
    width: usize,
) -> Vec<Feat<S>> {
    let mut out = Vec::with_capacity(grid_sizes.len());
    let mut row = 0;
    for &(h, w) in grid_sizes {
        let mut m = Feat::zeros((a * width, h, w));
        for i in 0..h {
            for j in 0..w {
                for ai in 0..a {
                    for c in 0..width {
                        m[(ai * width + c, i, j)] = rows[(row, c)];
                    }
                    row += 1;
                }
            }
        }
        out.push(m);
    }
    out
}

/// Normalize an RGB image to a zero-mean unit-variance `(3, H, W)` tensor
/// using its own per-channel statistics.
pub fn preprocess<S: Scalar>(pixels: &Array3<u8>) -> Feat<S> {
    let (h, w, _) = pixels.dim();
    let mut out = Feat::zeros((3, h, w));
    for c in 0..3 {
        let mut mean = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                mean += pixels[(i, j, c)] as f64;
            }
        }
        mean /= (h * w) as f64 * 255.0;
        let mut var = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let v = pixels[(i, j, c)] as f64 / 255.0 - mean;
                var += v * v;
            }
        }
        let std = (var / (h * w) as f64).sqrt().max(1e-3);
        for i in 0..h {
            for j in 0..w {
                out[(c, i, j)] = S::from_f64((pixels[(i, j, c)] as f64 / 255.0 - mean) / std);
            }
        }
    }
    out
}
