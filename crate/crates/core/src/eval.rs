//! Frame-level mean average precision for multi-label detections.
//!
//! Every `(box, class, score)` triple of a detection is ranked separately
//! per class. A detection is a true positive when an unmatched ground
//! truth of that class in the same frame overlaps it with IoU at least the
//! threshold. AP is the area under the interpolated precision envelope.

use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::geometry::iou;
use crate::synthdata::GroundTruth;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Mean AP over classes with ground truth; 0 when there are none.
    pub map: f64,
    pub iou_threshold: f64,
}

impl EvalReport {
    /// Recomputes the mean from the per-class entries.
    pub fn recomputed_map(&self) -> f64 {
        let aps: Vec<f64> = self.per_class.iter().filter_map(|c| c.ap).collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

/// All-point interpolated AP of a ranked list of hit flags against
/// `positives` ground truths.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Frame mAP over `classes` classes. `detections[f]` and `ground_truth[f]`
/// belong to frame `f`.
pub fn frame_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    classes: usize,
    iou_threshold: f64,
) -> EvalReport {
    assert_eq!(detections.len(), ground_truth.len(), "frame count mismatch");
    let per_class: Vec<ClassReport> = (0..classes)
        .map(|c| {
            let gt_count = ground_truth
                .iter()
                .flatten()
                .filter(|g| g.labels.contains(&c))
                .count();
            let mut ranked: Vec<(f64, usize, usize)> = detections
                .iter()
                .enumerate()
                .flat_map(|(f, ds)| ds.iter().enumerate().map(move |(k, d)| (d.action_scores[c], f, k)))
                .collect();
            // stable: equal scores keep frame, then detection order
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
            let hits: Vec<bool> = ranked
                .iter()
                .map(|&(_, f, k)| {
                    let b = &detections[f][k].bbox;
                    let best = ground_truth[f]
                        .iter()
                        .enumerate()
                        .filter(|(j, g)| !used[f][*j] && g.labels.contains(&c))
                        .map(|(j, g)| (j, iou(b, &g.bbox)))
                        .filter(|&(_, o)| o >= iou_threshold)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                    match best {
                        Some((j, _)) => {
                            used[f][j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            ClassReport {
                ap: (gt_count > 0).then(|| average_precision(&hits, gt_count)),
                gt_count,
                det_count: ranked.len(),
            }
        })
        .collect();
    let mut report = EvalReport {
        per_class,
        map: 0.0,
        iou_threshold,
    };
    report.map = report.recomputed_map();
    report
}
