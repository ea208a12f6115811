//! Training objectives: supervised detection losses, soft self-training
//! losses, segmentation cross-entropy and the three feature-imitation
//! distillation losses. Every loss returns its value together with the
//! analytic gradient of its prediction input, so the training engine never
//! needs numeric differentiation.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::nn::{Conv2d, Feat, GradBuf, ParamReg, ParamSet};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Fixed rebalancing factor for the soft classification loss in
/// self-training: raw soft focal values start three to four orders of
/// magnitude below the localization loss.
pub const SOFT_CLS_WEIGHT: f64 = 5e3;

pub const BALANCED_L1_ALPHA: f64 = 0.5;
pub const BALANCED_L1_GAMMA: f64 = 1.5;

/// Smooth rebalanced L1 on box deltas. Mean over elements; `pred` and
/// `target` are `(N, 4)` rows for the anchors being supervised.
///
/// With `b = e^(γ/α) - 1` the inner branch `(α/b)(b|x|+1)ln(b|x|+1) - α|x|`
/// meets `γ|x| + C` at `|x| = 1` in both value and slope.
pub fn balanced_l1<S: Scalar>(
    pred: &Array2<S>,
    target: &Array2<S>,
    alpha: f64,
    gamma: f64,
) -> Result<(S, Array2<S>)> {
    if alpha <= 0.0 || gamma <= 0.0 {
        return Err(Error::Config(format!(
            "balanced_l1: alpha {alpha} and gamma {gamma} must be positive"
        )));
    }
    if pred.dim() != target.dim() {
        return Err(Error::Input(format!(
            "balanced_l1: pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Ok((S::zero(), Array2::zeros(pred.dim())));
    }
    let a = S::from_f64(alpha);
    let g = S::from_f64(gamma);
    let b = S::from_f64((gamma / alpha).exp() - 1.0);
    let c = g / b - a;
    let n = S::from_usize(pred.len());
    let mut total = S::zero();
    let mut grad = Array2::zeros(pred.dim());
    for (i, (&p, &t)) in pred.iter().zip(target.iter()).enumerate() {
        let x = p - t;
        let ax = x.abs();
        let (v, slope) = if ax < S::one() {
            let u = b * ax + S::one();
            ((a / b) * u * u.ln() - a * ax, a * u.ln())
        } else {
            (g * ax + c, g)
        };
        total += v;
        grad.as_slice_mut().unwrap()[i] = x.signum() * slope / n;
    }
    Ok((total / n, grad))
}

fn check_targets_unit<S: Scalar>(y: &Array2<S>, what: &str) -> Result<()> {
    if y.iter().any(|&v| v < S::zero() || v > S::one() || !v.is_finite()) {
        return Err(Error::Input(format!("{what}: targets must lie in [0, 1]")));
    }
    Ok(())
}

/// Pointwise focal term on a continuous target: `|y - σ|^β · BCE(σ, y)` and
/// its derivative in the logit.
fn focal_term<S: Scalar>(z: S, y: S, beta: f64) -> (S, S) {
    let s = sigmoid(z);
    let ce = y * softplus(-z) + (S::one() - y) * softplus(z);
    let gap = (y - s).abs();
    if beta == 0.0 {
        return (ce, s - y);
    }
    let be = S::from_f64(beta);
    let w = gap.powf(be);
    // d|y-σ|^β/dz = β|y-σ|^(β-1) sign(σ-y) σ(1-σ)
    let dw = if gap == S::zero() {
        S::zero()
    } else {
        be * gap.powf(be - S::one()) * (s - y).signum() * s * (S::one() - s)
    };
    (w * ce, dw * ce + w * (s - y))
}

/// Quality focal loss for supervised classification: targets are the IoU
/// quality of each anchor's matched box at its class (zero elsewhere). Sum
/// over all entries, normalized by the number of positive anchors.
pub fn quality_focal<S: Scalar>(
    pred_logits: &Array2<S>,
    quality_targets: &Array2<S>,
    beta: f64,
) -> Result<(S, Array2<S>)> {
    if pred_logits.dim() != quality_targets.dim() {
        return Err(Error::Input(format!(
            "quality_focal: logits {:?} vs targets {:?}",
            pred_logits.dim(),
            quality_targets.dim()
        )));
    }
    check_targets_unit(quality_targets, "quality_focal")?;
    let num_pos = quality_targets
        .rows()
        .into_iter()
        .filter(|r| r.iter().any(|&v| v > S::zero()))
        .count();
    let norm = S::from_usize(num_pos.max(1));
    let mut total = S::zero();
    let mut grad = Array2::zeros(pred_logits.dim());
    for (i, (&z, &y)) in pred_logits.iter().zip(quality_targets.iter()).enumerate() {
        let (v, d) = focal_term(z, y, beta);
        total += v;
        grad.as_slice_mut().unwrap()[i] = d / norm;
    }
    Ok((total / norm, grad))
}

/// Soft focal loss for self-training: same pointwise form applied to dense
/// teacher scores, mean over all anchors and classes, scaled by `weight`
/// ([`SOFT_CLS_WEIGHT`] in the full pipeline).
pub fn soft_focal<S: Scalar>(
    pred_logits: &Array2<S>,
    soft_targets: &Array2<S>,
    gamma: f64,
    weight: f64,
) -> Result<(S, Array2<S>)> {
    if pred_logits.dim() != soft_targets.dim() {
        return Err(Error::Input(format!(
            "soft_focal: logits {:?} vs targets {:?}",
            pred_logits.dim(),
            soft_targets.dim()
        )));
    }
    check_targets_unit(soft_targets, "soft_focal")?;
    let scale = S::from_f64(weight) / S::from_usize(pred_logits.len().max(1));
    let mut total = S::zero();
    let mut grad = Array2::zeros(pred_logits.dim());
    for (i, (&z, &y)) in pred_logits.iter().zip(soft_targets.iter()).enumerate() {
        let (v, d) = focal_term(z, y, gamma);
        total += v * scale;
        grad.as_slice_mut().unwrap()[i] = d * scale;
    }
    Ok((total, grad))
}

pub const SEG_IGNORE: u8 = 255;

#[derive(Debug)]
pub struct SegLoss<S> {
    pub value: S,
    pub grad: Array3<S>,
    /// Set when every pixel carried the ignore label; the value is 0 then.
    pub all_ignored: bool,
}

/// Per-pixel softmax cross-entropy over a class-index mask, mean over pixels
/// not labelled `SEG_IGNORE`.
pub fn seg_cross_entropy<S: Scalar>(
    logits: &Array3<S>,
    mask: &ndarray::Array2<u8>,
) -> Result<SegLoss<S>> {
    let (c, h, w) = logits.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Input(format!(
            "seg_cross_entropy: logits {:?} vs mask {:?}",
            logits.dim(),
            mask.dim()
        )));
    }
    let count = mask.iter().filter(|&&m| m != SEG_IGNORE).count();
    let mut grad = Array3::zeros(logits.dim());
    if count == 0 {
        return Ok(SegLoss {
            value: S::zero(),
            grad,
            all_ignored: true,
        });
    }
    let norm = S::from_usize(count);
    let mut total = S::zero();
    for i in 0..h {
        for j in 0..w {
            let m = mask[(i, j)];
            if m == SEG_IGNORE {
                continue;
            }
            let t = m as usize;
            if t >= c {
                return Err(Error::Input(format!(
                    "seg_cross_entropy: class {t} at ({i}, {j}) but only {c} channels"
                )));
            }
            let mut mx = logits[(0, i, j)];
            for ci in 1..c {
                mx = mx.max(logits[(ci, i, j)]);
            }
            let mut denom = S::zero();
            for ci in 0..c {
                denom += (logits[(ci, i, j)] - mx).exp();
            }
            let lse = mx + denom.ln();
            total += lse - logits[(t, i, j)];
            for ci in 0..c {
                let p = (logits[(ci, i, j)] - lse).exp();
                let onehot = if ci == t { S::one() } else { S::zero() };
                grad[(ci, i, j)] = (p - onehot) / norm;
            }
        }
    }
    Ok(SegLoss {
        value: total / norm,
        grad,
        all_ignored: false,
    })
}

/// Channel adaptation between student and teacher feature pyramids: either a
/// trained 1x1 convolution per level, or identity when the widths already
/// agree.
#[derive(Debug, Clone)]
pub enum Projector {
    Identity,
    Conv1x1(Vec<Conv2d>),
}

impl Projector {
    pub fn conv1x1<S: Scalar>(
        reg: &mut ParamReg<S>,
        name: &str,
        student_ch: usize,
        teacher_ch: usize,
        levels: usize,
    ) -> Self {
        let convs = (0..levels)
            .map(|l| {
                Conv2d::new(
                    reg,
                    &format!("{name}.l{l}"),
                    student_ch,
                    teacher_ch,
                    1,
                    1,
                    0,
                    true,
                )
            })
            .collect();
        Projector::Conv1x1(convs)
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, level: usize, x: &Feat<S>) -> Feat<S> {
        match self {
            Projector::Identity => x.clone(),
            Projector::Conv1x1(cs) => cs[level].forward(ps, x),
        }
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        level: usize,
        x: &Feat<S>,
        gy: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        match self {
            Projector::Identity => gy.clone(),
            Projector::Conv1x1(cs) => cs[level].backward(ps, x, gy, grads),
        }
    }
}

fn check_pyramids<S: Scalar>(teacher: &[Feat<S>], student: &[Feat<S>]) -> Result<()> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Config(format!(
            "feature distillation: {} teacher levels vs {} student levels",
            teacher.len(),
            student.len()
        )));
    }
    for (l, (t, s)) in teacher.iter().zip(student).enumerate() {
        let (_, th, tw) = t.dim();
        let (_, sh, sw) = s.dim();
        if (th, tw) != (sh, sw) {
            return Err(Error::Config(format!(
                "feature distillation: level {l} spatial mismatch {:?} vs {:?}",
                t.dim(),
                s.dim()
            )));
        }
    }
    Ok(())
}

fn check_projected<S: Scalar>(t: &Feat<S>, p: &Feat<S>, l: usize) -> Result<()> {
    if t.dim() != p.dim() {
        return Err(Error::Config(format!(
            "feature distillation: level {l} projected student {:?} vs teacher {:?}",
            p.dim(),
            t.dim()
        )));
    }
    Ok(())
}

/// Plain feature imitation: mean over levels of the elementwise MSE between
/// the teacher map and the projected student map. Returns the loss and the
/// gradient with respect to each student level; projector parameter gradients
/// go into `grads`.
pub fn kd_mse<S: Scalar>(
    ps: &ParamSet<S>,
    projector: &Projector,
    teacher_pyr: &[Feat<S>],
    student_pyr: &[Feat<S>],
    grads: &mut GradBuf<S>,
) -> Result<(S, Vec<Feat<S>>)> {
    check_pyramids(teacher_pyr, student_pyr)?;
    let nl = S::from_usize(teacher_pyr.len());
    let mut total = S::zero();
    let mut gx = Vec::with_capacity(student_pyr.len());
    for (l, (t, s)) in teacher_pyr.iter().zip(student_pyr).enumerate() {
        let p = projector.forward(ps, l, s);
        check_projected(t, &p, l)?;
        let m = S::from_usize(p.len());
        let mut level = S::zero();
        let mut gp = Feat::zeros(p.dim());
        for ((&tv, &pv), g) in t.iter().zip(p.iter()).zip(gp.iter_mut()) {
            let d = pv - tv;
            level += d * d;
            *g = (d + d) / (m * nl);
        }
        total += level / m;
        gx.push(projector.backward(ps, l, s, &gp, grads));
    }
    Ok((total / nl, gx))
}

/// Foreground/background-separated feature imitation. A cell is foreground
/// when its center (at the level's stride) falls inside any gt box; each
/// region is averaged over its own cells, weighted, and the per-level values
/// are averaged.
#[allow(clippy::too_many_arguments)]
pub fn kd_defeat<S: Scalar>(
    ps: &ParamSet<S>,
    projector: &Projector,
    teacher_pyr: &[Feat<S>],
    student_pyr: &[Feat<S>],
    strides: &[usize],
    gt_boxes: &[Box2<S>],
    fg_weight: f64,
    bg_weight: f64,
    grads: &mut GradBuf<S>,
) -> Result<(S, Vec<Feat<S>>)> {
    check_pyramids(teacher_pyr, student_pyr)?;
    if strides.len() != teacher_pyr.len() {
        return Err(Error::Config(format!(
            "kd_defeat: {} strides for {} levels",
            strides.len(),
            teacher_pyr.len()
        )));
    }
    if fg_weight < 0.0 || bg_weight < 0.0 {
        return Err(Error::Config(
            "kd_defeat: region weights must be non-negative".into(),
        ));
    }
    let nl = S::from_usize(teacher_pyr.len());
    let half = S::from_f64(0.5);
    let mut total = S::zero();
    let mut gx = Vec::with_capacity(student_pyr.len());
    for (l, (t, s)) in teacher_pyr.iter().zip(student_pyr).enumerate() {
        let p = projector.forward(ps, l, s);
        check_projected(t, &p, l)?;
        let (c, h, w) = p.dim();
        let stride = S::from_usize(strides[l]);
        let fg = ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
            let cx = (S::from_usize(j) + half) * stride;
            let cy = (S::from_usize(i) + half) * stride;
            gt_boxes.iter().any(|b| b.contains_point(cx, cy))
        });
        let n_fg = fg.iter().filter(|&&v| v).count();
        let n_bg = h * w - n_fg;
        let cell_err = |i: usize, j: usize| {
            let mut e = S::zero();
            for ci in 0..c {
                let d = p[(ci, i, j)] - t[(ci, i, j)];
                e += d * d;
            }
            e / S::from_usize(c)
        };
        let mut level = S::zero();
        let mut gp = Feat::zeros(p.dim());
        for i in 0..h {
            for j in 0..w {
                let (wgt, cnt) = if fg[(i, j)] {
                    (fg_weight, n_fg)
                } else {
                    (bg_weight, n_bg)
                };
                let scale = S::from_f64(wgt) / S::from_usize(cnt.max(1) * c);
                level += cell_err(i, j) * S::from_f64(wgt) / S::from_usize(cnt.max(1));
                for ci in 0..c {
                    let d = p[(ci, i, j)] - t[(ci, i, j)];
                    gp[(ci, i, j)] = (d + d) * scale / nl;
                }
            }
        }
        total += level;
        gx.push(projector.backward(ps, l, s, &gp, grads));
    }
    Ok((total / nl, gx))
}

/// Disagreement floor so zero teacher-student disagreement degrades to
/// uniform cell weighting instead of a division by zero.
pub const PDF_EPS: f64 = 1e-6;

/// Prediction-disagreement-weighted feature imitation. Per level, each cell
/// is weighted by the mean absolute sigmoid gap between teacher and student
/// classification maps (normalized to sum 1 with an epsilon floor), then the
/// channel-averaged squared feature error is accumulated under those weights.
/// The weight map is a constant for the backward pass.
pub fn kd_pdf<S: Scalar>(
    ps: &ParamSet<S>,
    projector: &Projector,
    teacher_pyr: &[Feat<S>],
    student_pyr: &[Feat<S>],
    teacher_cls: &[Feat<S>],
    student_cls: &[Feat<S>],
    grads: &mut GradBuf<S>,
) -> Result<(S, Vec<Feat<S>>)> {
    check_pyramids(teacher_pyr, student_pyr)?;
    if teacher_cls.len() != teacher_pyr.len() || student_cls.len() != teacher_pyr.len() {
        return Err(Error::Config(format!(
            "kd_pdf: {} feature levels but {} teacher / {} student prediction levels",
            teacher_pyr.len(),
            teacher_cls.len(),
            student_cls.len()
        )));
    }
    let nl = S::from_usize(teacher_pyr.len());
    let mut total = S::zero();
    let mut gx = Vec::with_capacity(student_pyr.len());
    for (l, (t, s)) in teacher_pyr.iter().zip(student_pyr).enumerate() {
        let p = projector.forward(ps, l, s);
        check_projected(t, &p, l)?;
        let (c, h, w) = p.dim();
        let tc = &teacher_cls[l];
        let sc = &student_cls[l];
        if tc.dim() != sc.dim() || tc.dim().1 != h || tc.dim().2 != w {
            return Err(Error::Config(format!(
                "kd_pdf: level {l} prediction maps {:?} vs {:?} on {h}x{w} features",
                tc.dim(),
                sc.dim()
            )));
        }
        let k = S::from_usize(tc.dim().0);
        let mut weights = ndarray::Array2::zeros((h, w));
        let mut wsum = S::zero();
        for i in 0..h {
            for j in 0..w {
                let mut d = S::zero();
                for ki in 0..tc.dim().0 {
                    d += (sigmoid(tc[(ki, i, j)]) - sigmoid(sc[(ki, i, j)])).abs();
                }
                let v = d / k + S::from_f64(PDF_EPS);
                weights[(i, j)] = v;
                wsum += v;
            }
        }
        weights.mapv_inplace(|v| v / wsum);

        let mut level = S::zero();
        let mut gp = Feat::zeros(p.dim());
        let cn = S::from_usize(c);
        for i in 0..h {
            for j in 0..w {
                let wgt = weights[(i, j)];
                for ci in 0..c {
                    let d = p[(ci, i, j)] - t[(ci, i, j)];
                    level += wgt * d * d / cn;
                    gp[(ci, i, j)] = wgt * (d + d) / (cn * nl);
                }
            }
        }
        total += level;
        gx.push(projector.backward(ps, l, s, &gp, grads));
    }
    Ok((total / nl, gx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KDMethod {
    None,
    Mse,
    Pdf,
    Defeat,
}

/// Feature-distillation configuration. The projector itself is built by the
/// training engine from the model pair's channel widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    pub method: KDMethod,
    /// Foreground region weight (defeat only).
    pub fg_weight: f64,
    /// Background region weight (defeat only).
    pub bg_weight: f64,
    /// Weight of the KD term in the total loss.
    pub weight: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            method: KDMethod::None,
            fg_weight: 2.0,
            bg_weight: 0.5,
            weight: 1.0,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fg_weight < 0.0 || self.bg_weight < 0.0 || self.weight < 0.0 {
            return Err(Error::Config(
                "kd: all distillation weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// What kind of supervision a mini-batch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Ground-truth detection labels: balanced L1 + quality focal.
    Supervised,
    /// Teacher soft targets: balanced L1 on soft deltas + weighted soft focal.
    SelfTrain,
    /// Segmentation cross-entropy.
    Segmentation,
}

/// Raw (unweighted) component values for one mini-batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents<S> {
    pub loc: Option<S>,
    pub cls: Option<S>,
    pub seg: Option<S>,
    pub kd: Option<S>,
}

#[derive(Debug, Clone)]
pub struct LossTerm<S> {
    pub name: &'static str,
    pub value: S,
    pub weight: S,
}

#[derive(Debug, Clone)]
pub struct LossBundle<S> {
    pub terms: Vec<LossTerm<S>>,
}

impl<S: Scalar> LossBundle<S> {
    pub fn total(&self) -> S {
        self.terms
            .iter()
            .map(|t| t.value * t.weight)
            .fold(S::zero(), |a, b| a + b)
    }

    pub fn get(&self, name: &str) -> Option<S> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// Combine per-batch components into a weighted bundle for one training mode.
/// Self-training applies [`SOFT_CLS_WEIGHT`] to the raw soft focal value; the
/// KD term, when configured, carries `kd.weight`.
pub fn assemble<S: Scalar>(
    components: &LossComponents<S>,
    mode: LossMode,
    kd: &KDConfig,
) -> Result<LossBundle<S>> {
    kd.validate()?;
    let need = |v: Option<S>, name: &str| {
        v.ok_or_else(|| Error::Config(format!("loss assembly: {mode:?} requires a {name} term")))
    };
    let absent = |v: Option<S>, name: &str| {
        if v.is_some() {
            Err(Error::Config(format!(
                "loss assembly: unexpected {name} term in {mode:?} mode"
            )))
        } else {
            Ok(())
        }
    };
    let mut terms = Vec::new();
    match mode {
        LossMode::Supervised => {
            absent(components.seg, "seg")?;
            terms.push(LossTerm {
                name: "loc",
                value: need(components.loc, "loc")?,
                weight: S::one(),
            });
            terms.push(LossTerm {
                name: "cls",
                value: need(components.cls, "cls")?,
                weight: S::one(),
            });
        }
        LossMode::SelfTrain => {
            absent(components.seg, "seg")?;
            terms.push(LossTerm {
                name: "loc",
                value: need(components.loc, "loc")?,
                weight: S::one(),
            });
            terms.push(LossTerm {
                name: "cls",
                value: need(components.cls, "cls")?,
                weight: S::from_f64(SOFT_CLS_WEIGHT),
            });
        }
        LossMode::Segmentation => {
            absent(components.loc, "loc")?;
            absent(components.cls, "cls")?;
            if kd.method == KDMethod::Pdf {
                return Err(Error::Config(
                    "loss assembly: disagreement-weighted distillation needs detection \
                     predictions from both models and cannot drive a segmentation-only student"
                        .into(),
                ));
            }
            terms.push(LossTerm {
                name: "seg",
                value: need(components.seg, "seg")?,
                weight: S::one(),
            });
        }
    }
    match (kd.method, components.kd) {
        (KDMethod::None, None) => {}
        (KDMethod::None, Some(_)) => {
            return Err(Error::Config(
                "loss assembly: kd term supplied but no method configured".into(),
            ))
        }
        (_, None) => {
            return Err(Error::Config(format!(
                "loss assembly: kd method {:?} configured but no kd term supplied",
                kd.method
            )))
        }
        (_, Some(v)) => terms.push(LossTerm {
            name: "kd",
            value: v,
            weight: S::from_f64(kd.weight),
        }),
    }
    for t in &terms {
        if !t.value.is_finite() || t.value < S::zero() {
            return Err(Error::Consistency(format!(
                "loss assembly: component {} = {} is not a finite non-negative value",
                t.name, t.value
            )));
        }
    }
    Ok(LossBundle { terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{central_gradient, max_rel_err};
    use crate::rng;
    use ndarray::{Array2, Array3};
    use rand::RngExt;

    fn rand_mat(shape: (usize, usize), lo: f64, hi: f64, tag: &str) -> Array2<f64> {
        let mut r = rng::stream(21, tag);
        Array2::from_shape_fn(shape, |_| r.random_range(lo..hi))
    }

    #[test]
    fn balanced_l1_zero_at_fixed_point_and_branch_continuity() {
        let t = rand_mat((5, 4), -2.0, 2.0, "bl1");
        let (v, g) = balanced_l1(&t, &t, 0.5, 1.5).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        // both branches evaluated exactly at |x| = 1
        let (a, g) = (0.5, 1.5);
        let b = (g / a as f64).exp() - 1.0;
        let c = g / b - a;
        let inner = (a / b) * (b + 1.0) * (b + 1.0f64).ln() - a;
        let outer = g + c;
        assert!((inner - outer).abs() < 1e-9);
        // slope continuity: a*ln(b+1) vs g
        assert!((a * (b + 1.0f64).ln() - g).abs() < 1e-9);
    }

    #[test]
    fn balanced_l1_gradient_saturates_at_gamma() {
        let pred = Array2::from_elem((1, 1), 5.0f64);
        let target = Array2::zeros((1, 1));
        let (_, grad) = balanced_l1(&pred, &target, 0.5, 1.5).unwrap();
        assert!((grad[(0, 0)] - 1.5).abs() < 1e-12);
        let (_, grad) = balanced_l1(&target, &pred, 0.5, 1.5).unwrap();
        assert!((grad[(0, 0)] + 1.5).abs() < 1e-12);

        let num = central_gradient(
            |p| {
                let pa = Array2::from_shape_vec((1, 1), p.to_vec()).unwrap();
                balanced_l1(&pa, &target, 0.5, 1.5).unwrap().0
            },
            &[5.0],
            1e-5,
        );
        assert!((num[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn balanced_l1_gradient_matches_fd() {
        let pred = rand_mat((4, 4), -3.0, 3.0, "bl1-p");
        let target = rand_mat((4, 4), -3.0, 3.0, "bl1-t");
        let (_, grad) = balanced_l1(&pred, &target, 0.5, 1.5).unwrap();
        let p0: Vec<f64> = pred.iter().copied().collect();
        let num = central_gradient(
            |p| {
                let pa = Array2::from_shape_vec((4, 4), p.to_vec()).unwrap();
                balanced_l1(&pa, &target, 0.5, 1.5).unwrap().0
            },
            &p0,
            1e-4,
        );
        let ana: Vec<f64> = grad.iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-8) < 1e-3);
    }

    #[test]
    fn balanced_l1_rejects_bad_params() {
        let z = Array2::<f64>::zeros((1, 4));
        assert!(matches!(
            balanced_l1(&z, &z, 0.0, 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            balanced_l1(&z, &z, 0.5, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quality_focal_hand_value() {
        // y=1, sigma=0.5: |y-s|^2 * (-ln 0.5) = 0.25 ln 2
        let logits = Array2::<f64>::zeros((1, 1));
        let targets = Array2::ones((1, 1));
        let (v, _) = quality_focal(&logits, &targets, 2.0).unwrap();
        assert!((v - 0.25 * 2.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.17328).abs() < 1e-4);

        // sigma == y -> exactly 0
        let y = Array2::from_elem((1, 1), 0.5);
        let (v, g) = quality_focal(&logits, &y, 2.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn quality_focal_beta_zero_is_bce() {
        let logits = rand_mat((3, 4), -2.0, 2.0, "qf-z");
        let targets = rand_mat((3, 4), 0.0, 1.0, "qf-y");
        let (v, _) = quality_focal(&logits, &targets, 0.0).unwrap();
        let num_pos = 3.0;
        let mut want = 0.0;
        for (&z, &y) in logits.iter().zip(targets.iter()) {
            let s = 1.0 / (1.0 + (-z as f64).exp());
            want += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        assert!((v - want / num_pos).abs() < 1e-9);
    }

    #[test]
    fn quality_focal_rejects_bad_targets() {
        let logits = Array2::zeros((1, 2));
        let bad = Array2::from_shape_vec((1, 2), vec![0.5, 1.2]).unwrap();
        assert!(matches!(
            quality_focal(&logits, &bad, 2.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn quality_focal_gradient_matches_fd() {
        let logits = rand_mat((3, 5), -2.0, 2.0, "qf-fd-z");
        let mut targets = rand_mat((3, 5), 0.0, 1.0, "qf-fd-y");
        // one all-zero row exercises the negative-anchor path
        targets.row_mut(1).fill(0.0);
        let (_, grad) = quality_focal(&logits, &targets, 2.0).unwrap();
        let z0: Vec<f64> = logits.iter().copied().collect();
        let num = central_gradient(
            |z| {
                let za = Array2::from_shape_vec((3, 5), z.to_vec()).unwrap();
                quality_focal(&za, &targets, 2.0).unwrap().0
            },
            &z0,
            1e-4,
        );
        let ana: Vec<f64> = grad.iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-8) < 1e-3);
    }

    #[test]
    fn soft_focal_scales_the_focal_value() {
        let logits = Array2::<f64>::zeros((1, 1));
        let targets = Array2::ones((1, 1));
        let (v, _) = soft_focal(&logits, &targets, 2.0, 5e3).unwrap();
        assert!((v - 5e3 * 0.25 * 2.0f64.ln()).abs() < 1e-8);

        let y = logits.mapv(sigmoid);
        let (v, g) = soft_focal(&logits, &y, 2.0, 5e3).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn soft_focal_gradient_matches_fd() {
        let logits = rand_mat((4, 3), -2.0, 2.0, "sf-z");
        let targets = rand_mat((4, 3), 0.0, 0.2, "sf-y");
        let (_, grad) = soft_focal(&logits, &targets, 2.0, 5e3).unwrap();
        let z0: Vec<f64> = logits.iter().copied().collect();
        let num = central_gradient(
            |z| {
                let za = Array2::from_shape_vec((4, 3), z.to_vec()).unwrap();
                soft_focal(&za, &targets, 2.0, 5e3).unwrap().0
            },
            &z0,
            1e-4,
        );
        let ana: Vec<f64> = grad.iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-6) < 1e-3);
    }

    #[test]
    fn seg_cross_entropy_uniform_and_ignore() {
        // uniform logits over C classes -> ln C
        let c = 5usize;
        let logits = Array3::<f64>::zeros((c, 2, 2));
        let mask = ndarray::Array2::from_elem((2, 2), 1u8);
        let out = seg_cross_entropy(&logits, &mask).unwrap();
        assert!((out.value - (c as f64).ln()).abs() < 1e-12);
        assert!(!out.all_ignored);

        // strongly correct logits -> near 0
        let mut sharp = Array3::<f64>::zeros((3, 1, 1));
        sharp[(2, 0, 0)] = 50.0;
        let m1 = ndarray::Array2::from_elem((1, 1), 2u8);
        assert!(seg_cross_entropy(&sharp, &m1).unwrap().value < 1e-12);

        // everything ignored -> 0 with the flag set
        let all = ndarray::Array2::from_elem((2, 2), SEG_IGNORE);
        let out = seg_cross_entropy(&logits, &all).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.all_ignored);
    }

    #[test]
    fn seg_cross_entropy_hand_fixture_with_ignore() {
        // 2x2, one ignored pixel; mean over the other 3
        let mut logits = Array3::<f64>::zeros((2, 2, 2));
        logits[(0, 0, 0)] = 1.0;
        logits[(1, 0, 1)] = 2.0;
        logits[(0, 1, 0)] = -1.0;
        let mask = ndarray::Array2::from_shape_vec(
            (2, 2),
            vec![0u8, 1, 1, SEG_IGNORE],
        )
        .unwrap();
        let out = seg_cross_entropy(&logits, &mask).unwrap();
        let px = |zt: f64, zo: f64| (zt.exp() + zo.exp()).ln() - zt;
        let want = (px(1.0, 0.0) + px(2.0, 0.0) + px(0.0, -1.0)) / 3.0;
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn seg_cross_entropy_gradient_matches_fd() {
        let mut r = rng::stream(22, "seg-fd");
        let logits = Array3::from_shape_fn((3, 2, 3), |_| r.random_range(-2.0..2.0));
        let mask = ndarray::Array2::from_shape_vec(
            (2, 3),
            vec![0u8, 1, 2, SEG_IGNORE, 1, 0],
        )
        .unwrap();
        let out = seg_cross_entropy(&logits, &mask).unwrap();
        let z0: Vec<f64> = logits.iter().copied().collect();
        let num = central_gradient(
            |z| {
                let za = Array3::from_shape_vec((3, 2, 3), z.to_vec()).unwrap();
                seg_cross_entropy(&za, &mask).unwrap().value
            },
            &z0,
            1e-5,
        );
        let ana: Vec<f64> = out.grad.iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-8) < 1e-4);
    }

    fn rand_pyr(shapes: &[(usize, usize, usize)], tag: &str) -> Vec<Feat<f64>> {
        let mut r = rng::stream(23, tag);
        shapes
            .iter()
            .map(|&s| Array3::from_shape_fn(s, |_| r.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn kd_mse_fixed_point_and_offset() {
        let ps = ParamSet::<f64>::new();
        let pyr = rand_pyr(&[(3, 4, 4), (3, 2, 2)], "mse");
        let mut grads = GradBuf::zeros_like(&ps);
        let (v, gx) = kd_mse(&ps, &Projector::Identity, &pyr, &pyr, &mut grads).unwrap();
        assert_eq!(v, 0.0);
        assert!(gx.iter().all(|g| g.iter().all(|&x| x == 0.0)));

        let shifted: Vec<_> = pyr.iter().map(|f| f.mapv(|v| v + 0.75)).collect();
        let (v, _) = kd_mse(&ps, &Projector::Identity, &shifted, &pyr, &mut grads).unwrap();
        assert!((v - 0.75f64 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn kd_mse_two_level_hand_fixture() {
        let ps = ParamSet::<f64>::new();
        let t = vec![
            Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
        ];
        let s = vec![
            Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 0.0]).unwrap(),
            Array3::from_shape_vec((1, 2, 2), vec![2.0, 0.0, 0.0, 0.0]).unwrap(),
        ];
        let mut grads = GradBuf::zeros_like(&ps);
        let (v, _) = kd_mse(&ps, &Projector::Identity, &t, &s, &mut grads).unwrap();
        // level 0: 16/4 = 4; level 1: 4/4 = 1; mean = 2.5
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn kd_mse_shape_mismatch_is_config_error() {
        let ps = ParamSet::<f64>::new();
        let t = rand_pyr(&[(3, 4, 4)], "mm-t");
        let s = rand_pyr(&[(3, 2, 2)], "mm-s");
        let mut grads = GradBuf::zeros_like(&ps);
        assert!(matches!(
            kd_mse(&ps, &Projector::Identity, &t, &s, &mut grads),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kd_mse_gradients_match_fd_through_projector() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::stream(24, "proj");
        let mut layers = Vec::new();
        let mut reg = ParamReg {
            params: &mut ps,
            rng: &mut r,
            layers: &mut layers,
        };
        let proj = Projector::conv1x1(&mut reg, "proj", 2, 3, 2);
        let t = rand_pyr(&[(3, 3, 3), (3, 2, 2)], "fd-t");
        let s = rand_pyr(&[(2, 3, 3), (2, 2, 2)], "fd-s");
        let mut grads = GradBuf::zeros_like(&ps);
        let (_, gx) = kd_mse(&ps, &proj, &t, &s, &mut grads).unwrap();

        // student-feature gradient
        let s0: Vec<f64> = s[0].iter().copied().collect();
        let num = central_gradient(
            |sv| {
                let mut s2 = s.clone();
                s2[0] = Array3::from_shape_vec(s[0].dim(), sv.to_vec()).unwrap();
                let mut g = GradBuf::zeros_like(&ps);
                kd_mse(&ps, &proj, &t, &s2, &mut g).unwrap().0
            },
            &s0,
            1e-5,
        );
        let ana: Vec<f64> = gx[0].iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-8) < 1e-4);

        // projector parameter gradient
        let p0 = ps.data().to_vec();
        let nump = central_gradient(
            |pv| {
                let mut ps2 = ps.clone();
                ps2.data_mut().copy_from_slice(pv);
                let mut g = GradBuf::zeros_like(&ps2);
                kd_mse(&ps2, &proj, &t, &s, &mut g).unwrap().0
            },
            &p0,
            1e-5,
        );
        assert!(max_rel_err(grads.data(), &nump, 1e-8) < 1e-4);
    }

    #[test]
    fn kd_defeat_regions_and_decomposition() {
        let ps = ParamSet::<f64>::new();
        let t = rand_pyr(&[(2, 4, 4)], "df-t");
        let s = rand_pyr(&[(2, 4, 4)], "df-s");
        let strides = [8usize];
        let mut grads = GradBuf::zeros_like(&ps);

        // matching features -> 0
        let (v, _) = kd_defeat(
            &ps,
            &Projector::Identity,
            &t,
            &t,
            &strides,
            &[],
            2.0,
            0.5,
            &mut grads,
        )
        .unwrap();
        assert_eq!(v, 0.0);

        // no gt boxes -> pure background term = plain mse under unit weight
        let (bg_only, _) = kd_defeat(
            &ps,
            &Projector::Identity,
            &t,
            &s,
            &strides,
            &[],
            2.0,
            1.0,
            &mut grads,
        )
        .unwrap();
        let (mse, _) = kd_mse(&ps, &Projector::Identity, &t, &s, &mut grads).unwrap();
        assert!((bg_only - mse).abs() < 1e-12);

        // sum decomposition: per-cell sums over fg and bg equal the total
        let gt = vec![Box2::new(0.0, 0.0, 17.0, 17.0)]; // covers cells (0..2, 0..2) at stride 8
        let fg_cells = 4.0;
        let bg_cells = 12.0;
        let (fg_term, _) = kd_defeat(
            &ps,
            &Projector::Identity,
            &t,
            &s,
            &strides,
            &gt,
            1.0,
            0.0,
            &mut grads,
        )
        .unwrap();
        let (bg_term, _) = kd_defeat(
            &ps,
            &Projector::Identity,
            &t,
            &s,
            &strides,
            &gt,
            0.0,
            1.0,
            &mut grads,
        )
        .unwrap();
        let total_cells = 16.0;
        assert!(
            (fg_term * fg_cells + bg_term * bg_cells - mse * total_cells).abs() < 1e-9
        );
    }

    #[test]
    fn kd_defeat_gradient_matches_fd() {
        let ps = ParamSet::<f64>::new();
        let t = rand_pyr(&[(2, 4, 4), (2, 2, 2)], "dfg-t");
        let s = rand_pyr(&[(2, 4, 4), (2, 2, 2)], "dfg-s");
        let strides = [8usize, 16];
        let gt = vec![Box2::new(4.0, 4.0, 20.0, 20.0)];
        let mut grads = GradBuf::zeros_like(&ps);
        let (_, gx) = kd_defeat(
            &ps,
            &Projector::Identity,
            &t,
            &s,
            &strides,
            &gt,
            2.0,
            0.5,
            &mut grads,
        )
        .unwrap();
        for l in 0..2 {
            let s0: Vec<f64> = s[l].iter().copied().collect();
            let num = central_gradient(
                |sv| {
                    let mut s2 = s.clone();
                    s2[l] = Array3::from_shape_vec(s[l].dim(), sv.to_vec()).unwrap();
                    let mut g = GradBuf::zeros_like(&ps);
                    kd_defeat(
                        &ps,
                        &Projector::Identity,
                        &t,
                        &s2,
                        &strides,
                        &gt,
                        2.0,
                        0.5,
                        &mut g,
                    )
                    .unwrap()
                    .0
                },
                &s0,
                1e-5,
            );
            let ana: Vec<f64> = gx[l].iter().copied().collect();
            assert!(max_rel_err(&ana, &num, 1e-8) < 1e-4, "level {l}");
        }
    }

    #[test]
    fn kd_pdf_degenerates_to_mse_and_concentrates() {
        let ps = ParamSet::<f64>::new();
        let t = rand_pyr(&[(2, 2, 2), (2, 1, 1)], "pdf-t");
        let s = rand_pyr(&[(2, 2, 2), (2, 1, 1)], "pdf-s");
        let cls = rand_pyr(&[(3, 2, 2), (3, 1, 1)], "pdf-c");
        let mut grads = GradBuf::zeros_like(&ps);

        // identical predictions -> uniform weights -> equals kd_mse
        let (v, _) = kd_pdf(&ps, &Projector::Identity, &t, &s, &cls, &cls, &mut grads).unwrap();
        let (mse, _) = kd_mse(&ps, &Projector::Identity, &t, &s, &mut grads).unwrap();
        assert!((v - mse).abs() < 1e-9);

        // all disagreement on one cell -> that cell's error dominates
        let t1 = vec![Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap()];
        let s1 = vec![Array3::from_shape_vec((1, 1, 2), vec![0.0, 0.0]).unwrap()];
        let tcls = vec![Array3::from_shape_vec((1, 1, 2), vec![8.0, 0.0]).unwrap()];
        let scls = vec![Array3::from_shape_vec((1, 1, 2), vec![-8.0, 0.0]).unwrap()];
        let (v, _) = kd_pdf(&ps, &Projector::Identity, &t1, &s1, &tcls, &scls, &mut grads)
            .unwrap();
        // weights ~ (1, 0): loss ~ err(cell 0) = 1.0
        assert!((v - 1.0).abs() < 1e-2);

        // hand fixture: 4 cells, one channel
        let t4 = vec![Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap()];
        let s4 = vec![Array3::from_shape_vec((1, 2, 2), vec![0.0, 2.0, 1.0, 3.0]).unwrap()];
        let tc = vec![Array3::from_shape_vec((1, 2, 2), vec![2.0, -2.0, 0.0, 1.0]).unwrap()];
        let sc = vec![Array3::from_shape_vec((1, 2, 2), vec![-2.0, 2.0, 0.0, 1.0]).unwrap()];
        let (v, _) =
            kd_pdf(&ps, &Projector::Identity, &t4, &s4, &tc, &sc, &mut grads).unwrap();
        let gap = sigmoid(2.0f64) - sigmoid(-2.0f64);
        let d = [gap + PDF_EPS, gap + PDF_EPS, PDF_EPS, PDF_EPS];
        let wsum: f64 = d.iter().sum();
        let errs = [1.0, 1.0, 0.0, 4.0];
        let want: f64 = d
            .iter()
            .zip(errs.iter())
            .map(|(dv, e)| dv / wsum * e)
            .sum();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn kd_pdf_gradient_matches_fd() {
        let ps = ParamSet::<f64>::new();
        let t = rand_pyr(&[(2, 3, 3)], "pdfg-t");
        let s = rand_pyr(&[(2, 3, 3)], "pdfg-s");
        let tcls = rand_pyr(&[(4, 3, 3)], "pdfg-tc");
        let scls = rand_pyr(&[(4, 3, 3)], "pdfg-sc");
        let mut grads = GradBuf::zeros_like(&ps);
        let (_, gx) =
            kd_pdf(&ps, &Projector::Identity, &t, &s, &tcls, &scls, &mut grads).unwrap();
        let s0: Vec<f64> = s[0].iter().copied().collect();
        let num = central_gradient(
            |sv| {
                let s2 = vec![Array3::from_shape_vec(s[0].dim(), sv.to_vec()).unwrap()];
                let mut g = GradBuf::zeros_like(&ps);
                kd_pdf(&ps, &Projector::Identity, &t, &s2, &tcls, &scls, &mut g)
                    .unwrap()
                    .0
            },
            &s0,
            1e-5,
        );
        let ana: Vec<f64> = gx[0].iter().copied().collect();
        assert!(max_rel_err(&ana, &num, 1e-8) < 1e-4);
    }

    #[test]
    fn assemble_modes_and_errors() {
        let kd_off = KDConfig::default();
        let sup = LossComponents {
            loc: Some(1.5f64),
            cls: Some(0.5),
            ..Default::default()
        };
        let b = assemble(&sup, LossMode::Supervised, &kd_off).unwrap();
        assert_eq!(b.total(), 2.0);

        // self-training applies the 5e3 classification weight
        let st = LossComponents {
            loc: Some(1.0f64),
            cls: Some(2e-4),
            kd: Some(0.25),
            ..Default::default()
        };
        let kd_pdf_cfg = KDConfig {
            method: KDMethod::Pdf,
            ..Default::default()
        };
        let b = assemble(&st, LossMode::SelfTrain, &kd_pdf_cfg).unwrap();
        assert!((b.total() - (1.0 + 5e3 * 2e-4 + 0.25)).abs() < 1e-12);

        // segmentation + pdf is the cross-task impossibility
        let seg = LossComponents {
            seg: Some(0.7f64),
            kd: Some(0.1),
            ..Default::default()
        };
        assert!(matches!(
            assemble(&seg, LossMode::Segmentation, &kd_pdf_cfg),
            Err(Error::Config(_))
        ));
        let kd_mse_cfg = KDConfig {
            method: KDMethod::Mse,
            ..Default::default()
        };
        let b = assemble(&seg, LossMode::Segmentation, &kd_mse_cfg).unwrap();
        assert!((b.total() - 0.8).abs() < 1e-12);

        // missing pieces
        let empty = LossComponents::<f64>::default();
        assert!(matches!(
            assemble(&empty, LossMode::Supervised, &kd_off),
            Err(Error::Config(_))
        ));
        let no_kd_term = LossComponents {
            loc: Some(1.0f64),
            cls: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            assemble(&no_kd_term, LossMode::Supervised, &kd_mse_cfg),
            Err(Error::Config(_))
        ));
    }
}
