//! Set-prediction objective with per-stage bipartite matching.
//!
//! Every stage is matched to the ground truth independently. The human
//! head gets a two-way cross-entropy over all queries; matched queries
//! additionally get L1 and GIoU box losses and a binary cross-entropy
//! action loss. Stage losses are summed.

use serde::{Deserialize, Serialize};
use stmixer_tensor::{Tensor, Var};

use crate::decoder::{human_probs, StageOutput, HUMAN};
use crate::error::Result;
use crate::geometry::{boxes_from_pqueries, giou, tensor_to_pqueries, pquery_to_box, BBox};
use crate::hungarian::{hungarian, Assignment};
use crate::synthdata::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub act: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 2.0,
            giou: 2.0,
            act: 24.0,
        }
    }
}

/// Corner coordinates divided by the frame width/height.
pub fn normalize_box(b: &BBox, frame: (usize, usize)) -> [f64; 4] {
    let (w, h) = (frame.0 as f64, frame.1 as f64);
    [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h]
}

/// `cost[i][j] = −λ_cls·p_i + λ_L1·‖b̂_i − b̂_j‖₁ − λ_giou·GIoU(b_i, b_j)`
/// with `b̂` normalized by the frame size.
pub fn match_cost(
    human_prob: &[f64],
    boxes: &[BBox],
    gts: &[GroundTruth],
    frame: (usize, usize),
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    human_prob
        .iter()
        .zip(boxes)
        .map(|(&p, b)| {
            let nb = normalize_box(b, frame);
            gts.iter()
                .map(|g| {
                    let ng = normalize_box(&g.bbox, frame);
                    let l1: f64 = nb.iter().zip(&ng).map(|(a, c)| (a - c).abs()).sum();
                    -w.cls * p + w.l1 * l1 - w.giou * giou(b, &g.bbox)
                })
                .collect()
        })
        .collect()
}

/// Cost matrix and optimal assignment for one stage.
pub fn match_stage(
    stage: &StageOutput<'_>,
    gts: &[GroundTruth],
    frame: (usize, usize),
    w: &LossWeights,
) -> Result<Assignment> {
    let probs = human_probs(&stage.human_logits.value());
    let boxes: Vec<BBox> = tensor_to_pqueries(&stage.state.positional.value())
        .iter()
        .map(pquery_to_box)
        .collect();
    hungarian(&match_cost(&probs, &boxes, gts, frame, w))
}

/// Unweighted loss terms of one stage and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss<'t> {
    pub cls: Var<'t>,
    pub l1: Var<'t>,
    pub giou: Var<'t>,
    pub act: Var<'t>,
    pub total: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub act: f64,
    pub total: f64,
}

impl StageLoss<'_> {
    pub fn breakdown(&self) -> StageBreakdown {
        StageBreakdown {
            cls: self.cls.value().item(),
            l1: self.l1.value().item(),
            giou: self.giou.value().item(),
            act: self.act.value().item(),
            total: self.total.value().item(),
        }
    }
}

/// Differentiable `1 − GIoU` per row of `[K, 4]` predictions against
/// constant `[K, 4]` targets; returns `[K, 1]`.
pub fn giou_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let col = |v: Var<'t>, i: usize| v.narrow(1, i, 1);
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx1, gy1, gx2, gy2) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.relu();
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_p = px2.sub(px1)?.mul(py2.sub(py1)?)?;
    let area_g = gx2.sub(gx1)?.mul(gy2.sub(gy1)?)?;
    let union = area_p.add(area_g)?.sub(inter)?;
    let hull = px2
        .maximum(gx2)?
        .sub(px1.minimum(gx1)?)?
        .mul(py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?)?;
    let iou = inter.div(union)?;
    let giou = iou.sub(hull.sub(union)?.div(hull)?)?;
    Ok(giou.neg().add_scalar(1.0))
}

/// Loss of one stage under a fixed assignment. Without ground truth the
/// box and action terms are zero.
pub fn stage_loss<'t>(
    stage: &StageOutput<'t>,
    gts: &[GroundTruth],
    assignment: &Assignment,
    frame: (usize, usize),
    w: &LossWeights,
) -> Result<StageLoss<'t>> {
    let tape = stage.human_logits.tape();
    let n = stage.human_logits.shape()[0];
    let classes = stage.action_logits.shape()[1];
    let mut target = Tensor::zeros([n, 2]);
    for i in 0..n {
        target.data_mut()[2 * i + 1 - HUMAN] = 1.0;
    }
    for &(p, _) in &assignment.pairs {
        target.data_mut()[2 * p + HUMAN] = 1.0;
        target.data_mut()[2 * p + 1 - HUMAN] = 0.0;
    }
    let cls = stage
        .human_logits
        .log_softmax()?
        .mul(tape.constant(target))?
        .sum_all()
        .scale(-1.0 / n as f64);

    let (l1, giou_term, act) = if assignment.pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        (zero, zero, zero)
    } else {
        let k = assignment.pairs.len();
        let preds: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let boxes = boxes_from_pqueries(stage.state.positional)?.index_select(&preds)?;
        let gt_boxes = Tensor::new(
            [k, 4],
            assignment.pairs.iter().flat_map(|&(_, g)| gts[g].bbox.to_array()).collect(),
        )?;
        let scale = Tensor::from_fn([k, 4], |i| {
            1.0 / if i % 2 == 0 { frame.0 } else { frame.1 } as f64
        });
        let norm_gt = Tensor::from_fn([k, 4], |i| gt_boxes.data()[i] * scale.data()[i]);
        let l1 = boxes
            .mul(tape.constant(scale))?
            .sub(tape.constant(norm_gt))?
            .abs()
            .sum_all()
            .scale(1.0 / k as f64);
        let giou_term = giou_loss(boxes, tape.constant(gt_boxes))?.mean_all();
        let mut labels = Tensor::zeros([k, classes]);
        for (row, &(_, g)) in assignment.pairs.iter().enumerate() {
            for &c in &gts[g].labels {
                labels.data_mut()[row * classes + c] = 1.0;
            }
        }
        let logits = stage.action_logits.index_select(&preds)?;
        // BCE with logits: softplus(x) − y·x
        let act = logits
            .softplus()
            .sub(logits.mul(tape.constant(labels))?)?
            .mean_all();
        (l1, giou_term, act)
    };
    let total = cls
        .scale(w.cls)
        .add(l1.scale(w.l1))?
        .add(giou_term.scale(w.giou))?
        .add(act.scale(w.act))?;
    Ok(StageLoss {
        cls,
        l1,
        giou: giou_term,
        act,
        total,
    })
}

/// Summed loss over stages with per-stage matching.
pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub stages: Vec<StageLoss<'t>>,
    pub assignments: Vec<Assignment>,
}

impl TotalLoss<'_> {
    pub fn breakdown(&self) -> Vec<StageBreakdown> {
        self.stages.iter().map(StageLoss::breakdown).collect()
    }
}

pub fn total_loss<'t>(
    trace: &[StageOutput<'t>],
    gts: &[GroundTruth],
    frame: (usize, usize),
    w: &LossWeights,
) -> Result<TotalLoss<'t>> {
    let first = trace
        .first()
        .ok_or_else(|| crate::error::Error::config("empty stage trace"))?;
    let mut total = first.human_logits.tape().constant(Tensor::scalar(0.0));
    let mut stages = Vec::with_capacity(trace.len());
    let mut assignments = Vec::with_capacity(trace.len());
    for stage in trace {
        let a = match_stage(stage, gts, frame, w)?;
        let l = stage_loss(stage, gts, &a, frame, w)?;
        total = total.add(l.total)?;
        stages.push(l);
        assignments.push(a);
    }
    Ok(TotalLoss {
        total,
        stages,
        assignments,
    })
}
