//! Anchor-to-target assignment: IoU matrices, hard matching (plain IoU
//! thresholds and mutual-guide style top-k), box delta coding and dense soft
//! targets built from raw teacher outputs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::model::DetectionOutput;
use crate::scalar::{sigmoid, Scalar};

/// Anchors kept per ground-truth box by the mutual-guide matcher.
pub const MUTUAL_GUIDE_TOPK: usize = 9;

/// Per-anchor assignment outcome. A positive anchor carries the index of the
/// ground-truth box it must regress to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMatch {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub anchors: Vec<AnchorMatch>,
}

impl MatchResult {
    /// `(anchor_index, gt_index)` pairs for the positive anchors.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.anchors.iter().enumerate().filter_map(|(i, m)| match m {
            AnchorMatch::Positive(g) => Some((i, *g)),
            _ => None,
        })
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }
}

/// Dense per-anchor targets distilled from a teacher: sigmoid class scores
/// and the teacher's regression output, with no thresholding or suppression.
#[derive(Debug, Clone)]
pub struct SoftTargets<S> {
    /// `(anchors, classes)`, each in `[0, 1]`.
    pub cls_scores: Array2<S>,
    /// `(anchors, 4)` box deltas, copied verbatim.
    pub reg_deltas: Array2<S>,
}

fn check_box<S: Scalar>(b: &Box2<S>, what: &str, i: usize) -> Result<()> {
    if !b.is_well_formed() || b.area() <= S::zero() {
        return Err(Error::Input(format!(
            "{what} {i} is degenerate: [{}, {}, {}, {}]",
            b.xmin, b.ymin, b.xmax, b.ymax
        )));
    }
    Ok(())
}

/// Pairwise IoU, `(len(a), len(b))`.
pub fn iou_matrix<S: Scalar>(boxes_a: &[Box2<S>], boxes_b: &[Box2<S>]) -> Result<Array2<S>> {
    for (i, b) in boxes_a.iter().enumerate() {
        check_box(b, "box (lhs)", i)?;
    }
    for (i, b) in boxes_b.iter().enumerate() {
        check_box(b, "box (rhs)", i)?;
    }
    let mut m = Array2::zeros((boxes_a.len(), boxes_b.len()));
    for (i, a) in boxes_a.iter().enumerate() {
        for (j, b) in boxes_b.iter().enumerate() {
            m[(i, j)] = a.iou(b);
        }
    }
    Ok(m)
}

/// Threshold matching. Per anchor: max IoU over gts decides positive
/// (`>= pos_thr`, argmax gt, ties to the lowest gt index), negative
/// (`< neg_thr`) or ignore. Afterwards every gt claims its highest-IoU anchor
/// so no gt goes unsupervised; a gt with zero overlap everywhere is left
/// unmatched rather than pinned to an arbitrary anchor.
pub fn match_iou<S: Scalar>(
    anchors: &[Box2<S>],
    gts: &[Box2<S>],
    pos_thr: S,
    neg_thr: S,
) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::Input("match_iou: no anchors".into()));
    }
    if pos_thr < neg_thr {
        return Err(Error::Input(format!(
            "match_iou: pos_thr {pos_thr} < neg_thr {neg_thr}"
        )));
    }
    if gts.is_empty() {
        return Ok(MatchResult {
            anchors: vec![AnchorMatch::Negative; anchors.len()],
        });
    }
    let m = iou_matrix(anchors, gts)?;
    let mut out = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let (mut best_g, mut best) = (0usize, S::zero());
        for g in 0..gts.len() {
            if m[(i, g)] > best {
                best = m[(i, g)];
                best_g = g;
            }
        }
        out.push(if best >= pos_thr {
            AnchorMatch::Positive(best_g)
        } else if best < neg_thr {
            AnchorMatch::Negative
        } else {
            AnchorMatch::Ignore
        });
    }
    let mut forced = vec![false; anchors.len()];
    for g in 0..gts.len() {
        let (mut best_a, mut best) = (0usize, S::zero());
        for i in 0..anchors.len() {
            if m[(i, g)] > best {
                best = m[(i, g)];
                best_a = i;
            }
        }
        if best > S::zero() && !forced[best_a] {
            out[best_a] = AnchorMatch::Positive(g);
            forced[best_a] = true;
        }
    }
    Ok(MatchResult { anchors: out })
}

/// Mutual-guide style matching: each gt keeps its top-k anchors under a
/// combined score where localization quality (IoU of the decoded predicted
/// box with the gt) and classification confidence at the gt class amplify the
/// plain anchor IoU. Anchors not selected by any gt are negative.
pub fn match_mutual_guide<S: Scalar>(
    anchors: &[Box2<S>],
    gts: &[Box2<S>],
    gt_classes: &[usize],
    cls_preds: &Array2<S>,
    reg_preds: &Array2<S>,
) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::Input("match_mutual_guide: no anchors".into()));
    }
    if gts.len() != gt_classes.len() {
        return Err(Error::Input(format!(
            "match_mutual_guide: {} gts but {} class labels",
            gts.len(),
            gt_classes.len()
        )));
    }
    if cls_preds.nrows() != anchors.len() || reg_preds.dim() != (anchors.len(), 4) {
        return Err(Error::Input(format!(
            "match_mutual_guide: predictions for {} anchors, expected {}",
            cls_preds.nrows(),
            anchors.len()
        )));
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= cls_preds.ncols()) {
        return Err(Error::Input(format!(
            "match_mutual_guide: gt class {c} out of range for {} classes",
            cls_preds.ncols()
        )));
    }
    if gts.is_empty() {
        return Ok(MatchResult {
            anchors: vec![AnchorMatch::Negative; anchors.len()],
        });
    }

    let m = iou_matrix(anchors, gts)?;
    // best (score, gt) claim per anchor; ties keep the lowest gt index
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for g in 0..gts.len() {
        let scores = mutual_guide_scores(anchors, &gts[g], gt_classes[g], cls_preds, reg_preds)?;
        let mut scored: Vec<(f64, usize)> = (0..anchors.len())
            .filter(|&i| m[(i, g)] > S::zero())
            .map(|i| (scores[i].as_f64(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(s, i) in scored.iter().take(MUTUAL_GUIDE_TOPK) {
            let better = match claim[i] {
                None => true,
                Some((cs, cg)) => s > cs || (s == cs && g < cg),
            };
            if better {
                claim[i] = Some((s, g));
            }
        }
    }
    Ok(MatchResult {
        anchors: claim
            .into_iter()
            .map(|c| match c {
                Some((_, g)) => AnchorMatch::Positive(g),
                None => AnchorMatch::Negative,
            })
            .collect(),
    })
}

/// Combined matching score of every anchor against one gt: plain anchor IoU,
/// plus IoU of the decoded predicted box (localization quality), plus the
/// sigmoid confidence at the gt class.
pub fn mutual_guide_scores<S: Scalar>(
    anchors: &[Box2<S>],
    gt: &Box2<S>,
    gt_class: usize,
    cls_preds: &Array2<S>,
    reg_preds: &Array2<S>,
) -> Result<Vec<S>> {
    let decoded = decode_boxes(reg_preds, anchors)?;
    Ok((0..anchors.len())
        .map(|i| {
            anchors[i].iou(gt) + decoded[i].iou(gt) + sigmoid(cls_preds[(i, gt_class)])
        })
        .collect())
}

/// Box → delta coding against anchors: center offsets normalized by anchor
/// size, log size ratios. `(N, 4)` rows are `(dx, dy, dw, dh)`.
pub fn encode_boxes<S: Scalar>(boxes: &[Box2<S>], anchors: &[Box2<S>]) -> Result<Array2<S>> {
    if boxes.len() != anchors.len() {
        return Err(Error::Input(format!(
            "encode_boxes: {} boxes vs {} anchors",
            boxes.len(),
            anchors.len()
        )));
    }
    let mut d = Array2::zeros((boxes.len(), 4));
    for (i, (b, a)) in boxes.iter().zip(anchors).enumerate() {
        check_box(b, "box", i)?;
        check_box(a, "anchor", i)?;
        let (bcx, bcy) = b.center();
        let (acx, acy) = a.center();
        d[(i, 0)] = (bcx - acx) / a.width();
        d[(i, 1)] = (bcy - acy) / a.height();
        d[(i, 2)] = (b.width() / a.width()).ln();
        d[(i, 3)] = (b.height() / a.height()).ln();
    }
    Ok(d)
}

/// Inverse of [`encode_boxes`].
pub fn decode_boxes<S: Scalar>(deltas: &Array2<S>, anchors: &[Box2<S>]) -> Result<Vec<Box2<S>>> {
    if deltas.dim() != (anchors.len(), 4) {
        return Err(Error::Input(format!(
            "decode_boxes: {:?} deltas vs {} anchors",
            deltas.dim(),
            anchors.len()
        )));
    }
    let half = S::from_f64(0.5);
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            check_box(a, "anchor", i)?;
            let (acx, acy) = a.center();
            let cx = acx + deltas[(i, 0)] * a.width();
            let cy = acy + deltas[(i, 1)] * a.height();
            let w = a.width() * deltas[(i, 2)].exp();
            let h = a.height() * deltas[(i, 3)].exp();
            Ok(Box2::new(
                cx - w * half,
                cy - h * half,
                cx + w * half,
                cy + h * half,
            ))
        })
        .collect()
}

/// Dense soft targets from raw teacher output: sigmoid class scores, verbatim
/// regression deltas, one row per anchor, nothing suppressed or thresholded.
pub fn make_soft_targets<S: Scalar>(
    teacher: &DetectionOutput<S>,
    expected_anchors: usize,
) -> Result<SoftTargets<S>> {
    if teacher.cls.nrows() != expected_anchors || teacher.reg.nrows() != expected_anchors {
        return Err(Error::Config(format!(
            "soft targets: teacher produced {} anchors, student expects {expected_anchors}",
            teacher.cls.nrows()
        )));
    }
    Ok(SoftTargets {
        cls_scores: teacher.cls.mapv(sigmoid),
        reg_deltas: teacher.reg.clone(),
    })
}
