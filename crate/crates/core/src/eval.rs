//! Detection and segmentation metrics: per-class average precision at IoU
//! thresholds, the threshold-averaged mAP, AP at loose thresholds for small
//! objects, and accumulated segmentation IoU.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assign::decode_boxes;
use crate::dataset::{ClassCatalog, MASK_IGNORE};
use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::model::DetectionOutput;
use crate::scalar::{sigmoid, Scalar};

/// Standard threshold ladder 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

pub const NMS_IOU: f64 = 0.5;
pub const NMS_TOP_K: usize = 300;
pub const SCORE_THRESH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: Box2<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: Box2<f64>,
    pub difficult: bool,
}

/// Precision/recall interpolation rule for the AP integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApInterp {
    /// Area under the precision envelope at every recall step.
    AllPoint,
    /// Legacy 11-point sampling at recalls 0.0, 0.1, ..., 1.0.
    ElevenPoint,
}

/// Average precision for one class at one IoU threshold.
///
/// Detections are ranked by descending score (ties broken by image id, then
/// input order) and matched greedily: each detection takes the highest-IoU
/// still-unmatched non-difficult ground truth with IoU at or above the
/// threshold. Difficult ground truths are excluded from the positive count
/// and absorb detections instead of turning them into false positives.
pub fn ap_at_iou(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    class_id: usize,
) -> Result<f64> {
    ap_at_iou_interp(dets, gts, iou_thr, class_id, ApInterp::AllPoint)
}

pub fn ap_at_iou_interp(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    class_id: usize,
    interp: ApInterp,
) -> Result<f64> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(Error::Input(format!(
            "IoU threshold {iou_thr} outside (0, 1)"
        )));
    }
    let (precisions, recalls) = pr_curve(dets, gts, iou_thr, class_id);
    Ok(ap_from_pr(&precisions, &recalls, interp))
}

/// Precision and recall after each counted detection, in rank order.
fn pr_curve(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    class_id: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut per_image: BTreeMap<&str, Vec<(usize, bool)>> = BTreeMap::new();
    let mut npos = 0usize;
    for (gi, g) in gts.iter().enumerate() {
        if g.class_id != class_id {
            continue;
        }
        per_image.entry(&g.image_id).or_default().push((gi, false));
        if !g.difficult {
            npos += 1;
        }
    }
    if npos == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class_id)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then_with(|| dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    for di in order {
        let d = &dets[di];
        let cands = per_image.get_mut(d.image_id.as_str());
        let mut best: Option<(usize, f64)> = None; // index into cands
        let mut difficult_hit = false;
        if let Some(cands) = cands.as_deref() {
            for (ci, &(gi, matched)) in cands.iter().enumerate() {
                let iou = d.bbox.iou(&gts[gi].bbox);
                if iou < iou_thr {
                    continue;
                }
                if gts[gi].difficult {
                    difficult_hit = true;
                } else if !matched && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((ci, iou));
                }
            }
        }
        match best {
            Some((ci, _)) => {
                cands.unwrap()[ci].1 = true;
                tp += 1;
            }
            None if difficult_hit => continue,
            None => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / npos as f64);
    }
    (precisions, recalls)
}

fn ap_from_pr(precisions: &[f64], recalls: &[f64], interp: ApInterp) -> f64 {
    if recalls.is_empty() {
        return 0.0;
    }
    match interp {
        ApInterp::AllPoint => {
            // envelope: max precision at any recall >= r
            let mut env = precisions.to_vec();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (i, &r) in recalls.iter().enumerate() {
                ap += (r - prev_r) * env[i];
                prev_r = r;
            }
            ap
        }
        ApInterp::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let p = precisions
                    .iter()
                    .zip(recalls)
                    .filter(|&(_, &r)| r >= t - 1e-12)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
    }
}

/// Class ids that have at least one non-difficult ground truth.
fn classes_with_gt(gts: &[GroundTruth]) -> Vec<usize> {
    let mut ids: Vec<usize> = gts
        .iter()
        .filter(|g| !g.difficult)
        .map(|g| g.class_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Mean over thresholds of the class-mean AP, restricted to classes that
/// actually appear in the ground truth.
pub fn map_over_thresholds(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Input("empty threshold list".into()));
    }
    let classes = classes_with_gt(gts);
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &t in thresholds {
        let mut class_sum = 0.0;
        for &c in &classes {
            class_sum += ap_at_iou(dets, gts, t, c)?;
        }
        total += class_sum / classes.len() as f64;
    }
    Ok(total / thresholds.len() as f64)
}

/// Class-wise greedy non-maximum suppression followed by a per-image score
/// cut to the `top_k` strongest surviving detections.
pub fn nms(dets: &[Detection], iou_thr: f64, top_k: usize) -> Vec<Detection> {
    let mut image_order: Vec<&str> = Vec::new();
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if !by_image.contains_key(d.image_id.as_str()) {
            image_order.push(&d.image_id);
        }
        by_image.entry(&d.image_id).or_default().push(i);
    }
    let mut out = Vec::new();
    for img in image_order {
        let idxs = &by_image[img];
        let mut kept: Vec<usize> = Vec::new();
        let mut classes: Vec<usize> = idxs.iter().map(|&i| dets[i].class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let mut order: Vec<usize> = idxs
                .iter()
                .copied()
                .filter(|&i| dets[i].class_id == c)
                .collect();
            order.sort_by(|&a, &b| {
                dets[b]
                    .score
                    .partial_cmp(&dets[a].score)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut class_kept: Vec<usize> = Vec::new();
            for i in order {
                if class_kept
                    .iter()
                    .all(|&j| dets[i].bbox.iou(&dets[j].bbox) <= iou_thr)
                {
                    class_kept.push(i);
                }
            }
            kept.extend(class_kept);
        }
        kept.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        kept.truncate(top_k);
        out.extend(kept.into_iter().map(|i| dets[i].clone()));
    }
    out
}

/// Turn raw per-anchor outputs into scored, decoded, clipped detections for
/// one image. No suppression is applied here.
pub fn decode_detections<S: Scalar>(
    out: &DetectionOutput<S>,
    anchors: &[Box2<S>],
    image_id: &str,
    image_size: (usize, usize),
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    let boxes = decode_boxes(&out.reg, anchors)?;
    let (h, w) = image_size;
    let mut dets = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let clipped = b
            .cast::<f64>()
            .clipped(w as f64, h as f64);
        if clipped.area() <= 0.0 {
            continue;
        }
        for c in 0..out.cls.dim().1 {
            let score = sigmoid(out.cls[(i, c)]).as_f64();
            if score >= score_thresh {
                dets.push(Detection {
                    image_id: image_id.to_string(),
                    class_id: c,
                    bbox: clipped,
                    score,
                });
            }
        }
    }
    Ok(dets)
}

/// Segmentation IoU accumulated over a whole set of masks. `255` pixels in
/// the ground truth are excluded. Per-class IoU is reported for classes that
/// occur in the ground truth; the mean runs over exactly those.
pub fn seg_iou(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    n_classes: usize,
) -> Result<SegIouReport> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut inter = vec![0u64; n_classes];
    let mut union = vec![0u64; n_classes];
    let mut gt_count = vec![0u64; n_classes];
    for (p, g) in preds.iter().zip(gts) {
        if p.dim() != g.dim() {
            return Err(Error::Input(format!(
                "mask shape mismatch: {:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            if gv == MASK_IGNORE {
                continue;
            }
            let (pv, gv) = (pv as usize, gv as usize);
            if gv >= n_classes || pv >= n_classes {
                return Err(Error::Input(format!(
                    "mask label {} outside {n_classes} classes",
                    gv.max(pv)
                )));
            }
            gt_count[gv] += 1;
            if pv == gv {
                inter[pv] += 1;
                union[pv] += 1;
            } else {
                union[pv] += 1;
                union[gv] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (gt_count[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegIouReport { per_class, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegIouReport {
    /// Indexed by class; `None` when the class never occurs in the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Full evaluation summary: the table the runs report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub thresholds: Vec<f64>,
    /// `per_class_ap[class][threshold]`; `None` when the class has no ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub ap10: Option<f64>,
    pub ap25: Option<f64>,
    pub seg_miou: Option<f64>,
    pub n_images: usize,
    pub n_gts: usize,
    pub n_dets: usize,
}

impl MetricReport {
    /// Evaluate detections against ground truth over the default thresholds.
    /// `small_object_aps` additionally reports AP at 0.10 and 0.25.
    pub fn detection(
        dets: &[Detection],
        gts: &[GroundTruth],
        catalog: &ClassCatalog,
        small_object_aps: bool,
    ) -> Result<Self> {
        let thresholds = default_thresholds();
        let classes = classes_with_gt(gts);
        let mut per_class_ap: Vec<Vec<Option<f64>>> = vec![Vec::new(); catalog.len()];
        for c in 0..catalog.len() {
            for &t in &thresholds {
                per_class_ap[c].push(if classes.contains(&c) {
                    Some(ap_at_iou(dets, gts, t, c)?)
                } else {
                    None
                });
            }
        }
        let class_mean_at = |ti: usize| -> f64 {
            let vals: Vec<f64> = per_class_ap.iter().filter_map(|row| row[ti]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let ap50 = class_mean_at(0);
        let ap75 = class_mean_at(5);
        let map = (0..thresholds.len()).map(class_mean_at).sum::<f64>() / thresholds.len() as f64;
        let loose = |thr: f64| -> Result<Option<f64>> {
            if !small_object_aps || classes.is_empty() {
                return Ok(None);
            }
            let mut sum = 0.0;
            for &c in &classes {
                sum += ap_at_iou(dets, gts, thr, c)?;
            }
            Ok(Some(sum / classes.len() as f64))
        };
        let mut image_ids: Vec<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
        image_ids.sort_unstable();
        image_ids.dedup();
        Ok(Self {
            class_names: catalog.names().to_vec(),
            thresholds,
            per_class_ap,
            ap50,
            ap75,
            map,
            ap10: loose(0.10)?,
            ap25: loose(0.25)?,
            seg_miou: None,
            n_images: image_ids.len(),
            n_gts: gts.len(),
            n_dets: dets.len(),
        })
    }

    pub fn with_seg_miou(mut self, miou: f64) -> Self {
        self.seg_miou = Some(miou);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0 + 1e-12).contains(&v);
        let mut all = vec![self.ap50, self.ap75, self.map];
        all.extend(self.ap10.iter().chain(&self.ap25).chain(&self.seg_miou));
        all.extend(self.per_class_ap.iter().flatten().flatten());
        if let Some(bad) = all.iter().find(|&&v| !ok(v)) {
            return Err(Error::Consistency(format!("metric {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("report: {e}")))
    }

    /// Aligned per-class table with the aggregate row last.
    pub fn table(&self) -> String {
        let name_w = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let mut header = format!("{:<name_w$}  {:>6}  {:>6}  {:>6}", "class", "AP50", "AP75", "mAP");
        if self.ap10.is_some() {
            header.push_str(&format!("  {:>6}  {:>6}", "AP10", "AP25"));
        }
        s.push_str(&header);
        s.push('\n');
        s.push_str(&"-".repeat(header.len()));
        s.push('\n');
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:>6.3}", v),
            None => format!("{:>6}", "-"),
        };
        for (c, name) in self.class_names.iter().enumerate() {
            let row = &self.per_class_ap[c];
            let mean: Option<f64> = if row.iter().all(|v| v.is_some()) && !row.is_empty() {
                Some(row.iter().flatten().sum::<f64>() / row.len() as f64)
            } else {
                None
            };
            s.push_str(&format!(
                "{name:<name_w$}  {}  {}  {}\n",
                fmt(row.first().copied().flatten()),
                fmt(row.get(5).copied().flatten()),
                fmt(mean),
            ));
        }
        s.push_str(&format!(
            "{:<name_w$}  {:>6.3}  {:>6.3}  {:>6.3}",
            "mean", self.ap50, self.ap75, self.map
        ));
        if let (Some(a10), Some(a25)) = (self.ap10, self.ap25) {
            s.push_str(&format!("  {a10:>6.3}  {a25:>6.3}"));
        }
        s.push('\n');
        if let Some(m) = self.seg_miou {
            s.push_str(&format!("seg mIoU {m:.3}\n"));
        }
        s.push_str(&format!(
            "images {}  gts {}  dets {}\n",
            self.n_images, self.n_gts, self.n_dets
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn det(img: &str, class: usize, b: [f64; 4], score: f64) -> Detection {
        Detection {
            image_id: img.into(),
            class_id: class,
            bbox: Box2::new(b[0], b[1], b[2], b[3]),
            score,
        }
    }

    fn gt(img: &str, class: usize, b: [f64; 4], difficult: bool) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            class_id: class,
            bbox: Box2::new(b[0], b[1], b[2], b[3]),
            difficult,
        }
    }

    #[test]
    fn single_good_detection_scores_one() {
        // det vs gt IoU = 90/100 = 0.9
        let gts = [gt("a", 0, [0.0, 0.0, 10.0, 10.0], false)];
        let dets = [det("a", 0, [0.0, 0.0, 10.0, 9.0], 0.9)];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 1.0);
        // and at a threshold above the overlap it becomes a false positive
        assert_eq!(ap_at_iou(&dets, &gts, 0.95, 0).unwrap(), 0.0);
    }

    #[test]
    fn missing_gt_caps_recall() {
        let gts = [
            gt("a", 0, [0.0, 0.0, 10.0, 10.0], false),
            gt("a", 0, [50.0, 50.0, 60.0, 60.0], false),
        ];
        let dets = [det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.8)];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 0.5);
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap() {
        let gts = [gt("a", 0, [0.0, 0.0, 10.0, 10.0], false)];
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", 0, [80.0, 80.0, 90.0, 90.0], 0.8),
        ];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 1.0);
        // reversed scores: the FP precedes the TP, envelope gives 0.5
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.8),
            det("a", 0, [80.0, 80.0, 90.0, 90.0], 0.9),
        ];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 0.5);
    }

    #[test]
    fn difficult_gts_neither_count_nor_penalize() {
        let gts = [
            gt("a", 0, [0.0, 0.0, 10.0, 10.0], false),
            gt("a", 0, [50.0, 50.0, 60.0, 60.0], true),
        ];
        // one det on the difficult gt (absorbed), one on the real gt
        let dets = [
            det("a", 0, [50.0, 50.0, 60.0, 60.0], 0.95),
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
        ];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 1.0);
    }

    #[test]
    fn second_detection_on_matched_gt_is_fp() {
        let gts = [gt("a", 0, [0.0, 0.0, 10.0, 10.0], false)];
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.8),
        ];
        let (p, r) = pr_curve(&dets, &gts, 0.5, 0);
        assert_eq!(r, vec![1.0, 1.0]);
        assert_eq!(p, vec![1.0, 0.5]);
        assert_eq!(ap_at_iou(&dets, &gts, 0.5, 0).unwrap(), 1.0);
    }

    #[test]
    fn threshold_domain_is_open() {
        let gts = [gt("a", 0, [0.0, 0.0, 1.0, 1.0], false)];
        for bad in [0.0, 1.0, 1.5, -0.1] {
            assert!(ap_at_iou(&[], &gts, bad, 0).is_err());
        }
        assert!(ap_at_iou(&[], &gts, 0.1, 0).is_ok());
    }

    /// Independent AP: re-run the documented greedy matching from scratch on
    /// every score prefix, then integrate the resulting PR points.
    fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64, class: usize) -> f64 {
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class_id == class)
            .collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then_with(|| dets[a].image_id.cmp(&dets[b].image_id))
                .then(a.cmp(&b))
        });
        let npos = gts
            .iter()
            .filter(|g| g.class_id == class && !g.difficult)
            .count();
        if npos == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for k in 1..=order.len() {
            // full greedy re-run on the k strongest detections
            let mut matched = vec![false; gts.len()];
            let (mut tp, mut fp) = (0usize, 0usize);
            for &di in &order[..k] {
                let d = &dets[di];
                let mut best: Option<(usize, f64)> = None;
                let mut difficult_hit = false;
                for (gi, g) in gts.iter().enumerate() {
                    if g.class_id != class || g.image_id != d.image_id {
                        continue;
                    }
                    let iou = d.bbox.iou(&g.bbox);
                    if iou < thr {
                        continue;
                    }
                    if g.difficult {
                        difficult_hit = true;
                    } else if !matched[gi] && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        matched[gi] = true;
                        tp += 1;
                    }
                    None if difficult_hit => {}
                    None => fp += 1,
                }
            }
            if tp + fp > 0 {
                points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
            }
        }
        points.dedup();
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..points.len() {
            let (r, _) = points[i];
            let env = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            if r > prev_r {
                ap += (r - prev_r) * env;
                prev_r = r;
            }
        }
        ap
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut r = crate::rng::stream(21, "ap-oracle");
        for case in 0..300 {
            let n_gts = r.random_range(1..=4);
            let n_dets = r.random_range(0..=6);
            let mut gts = Vec::new();
            for _ in 0..n_gts {
                let x = r.random_range(0.0..40.0);
                let y = r.random_range(0.0..40.0);
                let img = if r.random_range(0..2) == 0 { "a" } else { "b" };
                gts.push(gt(
                    img,
                    0,
                    [x, y, x + r.random_range(5.0..20.0), y + r.random_range(5.0..20.0)],
                    r.random_range(0..5) == 0,
                ));
            }
            let mut dets = Vec::new();
            for _ in 0..n_dets {
                // half the detections perturb a gt, half are random
                let (x, y, w, h) = if r.random_range(0..2) == 0 && !gts.is_empty() {
                    let g = &gts[r.random_range(0..gts.len())].bbox;
                    (
                        g.xmin + r.random_range(-3.0..3.0),
                        g.ymin + r.random_range(-3.0..3.0),
                        g.width() + r.random_range(-2.0..2.0),
                        g.height() + r.random_range(-2.0..2.0),
                    )
                } else {
                    (
                        r.random_range(0.0..40.0),
                        r.random_range(0.0..40.0),
                        r.random_range(5.0..20.0),
                        r.random_range(5.0..20.0),
                    )
                };
                let img = if r.random_range(0..2) == 0 { "a" } else { "b" };
                dets.push(det(
                    img,
                    0,
                    [x, y, x + w.max(1.0), y + h.max(1.0)],
                    r.random_range(0.05..1.0),
                ));
            }
            for thr in [0.3, 0.5, 0.75] {
                let fast = ap_at_iou(&dets, &gts, thr, 0).unwrap();
                let slow = ap_oracle(&dets, &gts, thr, 0);
                assert!(
                    (fast - slow).abs() < 1e-12,
                    "case {case} thr {thr}: {fast} vs {slow}\ndets {dets:#?}\ngts {gts:#?}"
                );
            }
        }
    }

    #[test]
    fn ap_monotonicity_under_edits() {
        let mut r = crate::rng::stream(33, "ap-mono");
        for _ in 0..100 {
            let mut gts = Vec::new();
            for i in 0..r.random_range(2..=4) {
                let x = 30.0 * i as f64;
                gts.push(gt("a", 0, [x, 0.0, x + 10.0, 10.0], false));
            }
            let mut dets = Vec::new();
            for g in gts.iter().take(r.random_range(1..=gts.len())) {
                dets.push(det(
                    "a",
                    0,
                    [g.bbox.xmin + 1.0, g.bbox.ymin, g.bbox.xmax, g.bbox.ymax],
                    r.random_range(0.3..0.9),
                ));
            }
            let base = ap_at_iou(&dets, &gts, 0.5, 0).unwrap();

            // lowest-score false positive can only hurt or tie
            let mut with_fp = dets.clone();
            with_fp.push(det("a", 0, [500.0, 500.0, 510.0, 510.0], 0.01));
            let worse = ap_at_iou(&with_fp, &gts, 0.5, 0).unwrap();
            assert!(worse <= base + 1e-12);

            // highest-score true positive on an unmatched gt can only help or tie
            let matched_boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            if let Some(free) = gts
                .iter()
                .find(|g| matched_boxes.iter().all(|b| b.iou(&g.bbox) < 0.5))
            {
                let mut with_tp = dets.clone();
                with_tp.push(Detection {
                    image_id: "a".into(),
                    class_id: 0,
                    bbox: free.bbox,
                    score: 0.99,
                });
                let better = ap_at_iou(&with_tp, &gts, 0.5, 0).unwrap();
                assert!(better + 1e-12 >= base);
            }
        }
    }

    #[test]
    fn ap_is_scale_invariant() {
        let mut r = crate::rng::stream(4, "ap-scale");
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for i in 0..4 {
            let x = r.random_range(0.0..50.0);
            let y = r.random_range(0.0..50.0);
            gts.push(gt("a", 0, [x, y, x + 12.0, y + 9.0], false));
            dets.push(det(
                "a",
                0,
                [x + 1.0, y + 1.0, x + 13.0, y + 8.0],
                0.2 + 0.2 * i as f64,
            ));
        }
        let base = ap_at_iou(&dets, &gts, 0.5, 0).unwrap();
        for s in [0.5, 3.0, 17.0] {
            let sg: Vec<_> = gts
                .iter()
                .map(|g| GroundTruth {
                    bbox: g.bbox.scaled(s),
                    ..g.clone()
                })
                .collect();
            let sd: Vec<_> = dets
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox.scaled(s),
                    ..d.clone()
                })
                .collect();
            assert_eq!(ap_at_iou(&sd, &sg, 0.5, 0).unwrap(), base);
        }
    }

    #[test]
    fn eleven_point_mode_differs_but_agrees_on_perfection() {
        let gts = [gt("a", 0, [0.0, 0.0, 10.0, 10.0], false)];
        let dets = [det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9)];
        assert_eq!(
            ap_at_iou_interp(&dets, &gts, 0.5, 0, ApInterp::ElevenPoint).unwrap(),
            1.0
        );
        // recall capped at 0.5: all-point gives 0.5, 11-point averages
        // max-precision over 11 recall cuts, 6 of which are reachable
        let gts2 = [
            gt("a", 0, [0.0, 0.0, 10.0, 10.0], false),
            gt("a", 0, [50.0, 0.0, 60.0, 10.0], false),
        ];
        let ap11 = ap_at_iou_interp(&dets, &gts2, 0.5, 0, ApInterp::ElevenPoint).unwrap();
        assert!((ap11 - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn map_reductions() {
        let gts = [
            gt("a", 0, [0.0, 0.0, 10.0, 10.0], false),
            gt("a", 1, [20.0, 0.0, 30.0, 10.0], false),
        ];
        let perfect = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", 1, [20.0, 0.0, 30.0, 10.0], 0.9),
        ];
        assert_eq!(
            map_over_thresholds(&perfect, &gts, &default_thresholds()).unwrap(),
            1.0
        );
        assert_eq!(map_over_thresholds(&[], &gts, &default_thresholds()).unwrap(), 0.0);
        // single threshold reduces to the class-mean AP at 0.5
        let partial = [det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9)];
        let m = map_over_thresholds(&partial, &gts, &[0.5]).unwrap();
        let a0 = ap_at_iou(&partial, &gts, 0.5, 0).unwrap();
        let a1 = ap_at_iou(&partial, &gts, 0.5, 1).unwrap();
        assert!((m - (a0 + a1) / 2.0).abs() < 1e-15);
        assert!(map_over_thresholds(&perfect, &gts, &[]).is_err());
    }

    #[test]
    fn nms_suppresses_class_wise() {
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            // IoU with the first: 50/150 = 1/3 < 0.5: kept
            det("a", 0, [5.0, 0.0, 15.0, 10.0], 0.7),
            // IoU with the first: 80/120 = 2/3 > 0.5: suppressed
            det("a", 0, [0.0, 2.0, 10.0, 10.0], 0.8),
            // same box as the suppressed one but another class: kept
            det("a", 1, [0.0, 2.0, 10.0, 10.0], 0.6),
            // different image: kept
            det("b", 0, [0.0, 2.0, 10.0, 10.0], 0.5),
        ];
        let kept = nms(&dets, 0.5, 300);
        assert_eq!(kept.len(), 4);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.6, 0.5]);

        // top-k cut happens after suppression, by score
        let kept = nms(&dets, 0.5, 2);
        assert_eq!(kept.len(), 3); // 2 in image a, 1 in image b
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_keeps_exact_ties_in_input_order() {
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.5),
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.5),
        ];
        let kept = nms(&dets, 0.5, 300);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], dets[0]);
    }

    #[test]
    fn seg_iou_fixtures() {
        let same = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 1]).unwrap();
        let rep = seg_iou(&[same.clone()], &[same.clone()], 2).unwrap();
        assert_eq!(rep.mean, 1.0);
        assert_eq!(rep.per_class, vec![Some(1.0), Some(1.0)]);

        // half-overlap: pred rows, gt columns
        let pred = Array2::from_shape_vec((2, 2), vec![1u8, 1, 0, 0]).unwrap();
        let gtm = Array2::from_shape_vec((2, 2), vec![1u8, 0, 1, 0]).unwrap();
        let rep = seg_iou(&[pred], &[gtm], 2).unwrap();
        assert_eq!(rep.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert!((rep.mean - 1.0 / 3.0).abs() < 1e-15);

        // disjoint class: IoU 0
        let pred = Array2::from_shape_vec((1, 2), vec![1u8, 1]).unwrap();
        let gtm = Array2::from_shape_vec((1, 2), vec![0u8, 0]).unwrap();
        let rep = seg_iou(&[pred], &[gtm], 3).unwrap();
        assert_eq!(rep.per_class, vec![Some(0.0), None, None]);
        assert_eq!(rep.mean, 0.0);
    }

    #[test]
    fn seg_iou_respects_ignore_and_shapes() {
        let pred = Array2::from_shape_vec((2, 2), vec![1u8, 1, 0, 0]).unwrap();
        let gtm = Array2::from_shape_vec((2, 2), vec![1u8, 255, 255, 0]).unwrap();
        let rep = seg_iou(&[pred.clone()], &[gtm.clone()], 2).unwrap();
        // only (0,0) and (1,1) count, both correct
        assert_eq!(rep.per_class, vec![Some(1.0), Some(1.0)]);

        let bad = Array2::zeros((3, 2));
        assert!(seg_iou(&[pred], &[bad], 2).is_err());
        assert!(seg_iou(&[], &[gtm], 2).is_err());
    }

    #[test]
    fn seg_iou_ignores_image_order() {
        let a1 = Array2::from_shape_vec((2, 2), vec![1u8, 0, 1, 0]).unwrap();
        let a2 = Array2::from_shape_vec((2, 2), vec![0u8, 0, 1, 1]).unwrap();
        let b1 = Array2::from_shape_vec((2, 2), vec![1u8, 1, 0, 0]).unwrap();
        let b2 = Array2::from_shape_vec((2, 2), vec![0u8, 1, 1, 0]).unwrap();
        let fwd = seg_iou(&[a1.clone(), a2.clone()], &[b1.clone(), b2.clone()], 2).unwrap();
        let rev = seg_iou(&[a2, a1], &[b2, b1], 2).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn report_is_consistent_and_serializable() {
        let cat = ClassCatalog::shapes();
        let gts = [
            gt("a", 0, [0.0, 0.0, 10.0, 10.0], false),
            gt("a", 1, [20.0, 0.0, 30.0, 10.0], false),
            gt("b", 0, [0.0, 0.0, 10.0, 10.0], false),
        ];
        let dets = [
            det("a", 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", 1, [20.0, 1.0, 30.0, 10.0], 0.8),
            det("b", 0, [2.0, 2.0, 12.0, 12.0], 0.7),
            det("b", 2, [40.0, 40.0, 50.0, 50.0], 0.6),
        ];
        let rep = MetricReport::detection(&dets, &gts, &cat, true)
            .unwrap()
            .with_seg_miou(0.42);
        rep.validate().unwrap();
        assert_eq!(rep.n_images, 2);
        assert_eq!(rep.n_gts, 3);
        assert_eq!(rep.n_dets, 4);
        // class 2 has no gt: excluded from means, dash in the table
        assert!(rep.per_class_ap[2].iter().all(|v| v.is_none()));

        // mAP equals the mean over thresholds of the class-mean AP
        let mut acc = 0.0;
        for ti in 0..rep.thresholds.len() {
            let vals: Vec<f64> = (0..2).map(|c| rep.per_class_ap[c][ti].unwrap()).collect();
            acc += vals.iter().sum::<f64>() / 2.0;
        }
        assert!((rep.map - acc / 10.0).abs() < 1e-12);

        let round: MetricReport = MetricReport::from_json(&rep.to_json().unwrap()).unwrap();
        assert_eq!(round, rep);

        let tbl = rep.table();
        assert!(tbl.contains("rectangle"));
        assert!(tbl.contains("AP50"));
        assert!(tbl.contains("AP10"));
        assert!(tbl.contains("seg mIoU 0.420"));
        assert!(tbl.contains("images 2  gts 3  dets 4"));
    }

    #[test]
    fn decode_detections_scores_and_clips() {
        use ndarray::arr2;
        let anchors = [
            Box2::new(0.0f64, 0.0, 10.0, 10.0),
            Box2::new(20.0, 20.0, 40.0, 40.0),
        ];
        // zero deltas: boxes equal anchors; logits picked for known sigmoids
        let out = DetectionOutput {
            cls: arr2(&[[0.0, -30.0], [2.0, -4.0]]),
            reg: Array2::zeros((2, 4)),
        };
        let dets = decode_detections(&out, &anchors, "img", (30, 30), 0.05).unwrap();
        // anchor 0 class 0: sigmoid(0) = 0.5; anchor 1 clipped to 30x30
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class_id, 0);
        assert!((dets[0].score - 0.5).abs() < 1e-12);
        assert_eq!(dets[0].bbox, Box2::new(0.0, 0.0, 10.0, 10.0));
        assert!((dets[1].score - sigmoid(2.0f64)).abs() < 1e-12);
        assert_eq!(dets[1].bbox, Box2::new(20.0, 20.0, 30.0, 30.0));
    }
}
