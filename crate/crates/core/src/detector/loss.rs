//! Anchor assignment, focal classification loss and smooth-L1 regression.

use super::net::{anchors, encode, Proposals};
use super::{DetectionBox, DetectorConfig};
use crate::autodiff::{Backward, Value};
use crate::error::Result;
use crate::eval::rotated_iou;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
pub const REGRESSION_WEIGHT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Positive { target: usize },
    Negative,
    Ignore,
}

/// IoU >= positive threshold is positive, <= negative threshold negative;
/// each ground-truth box also claims its best-overlapping anchor.
pub fn assign_anchors(anchors: &[DetectionBox], gt: &[DetectionBox], cfg: &DetectorConfig) -> Vec<AnchorLabel> {
    let mut best_iou = vec![0.0; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut per_gt_best = vec![(0.0, usize::MAX); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let iou = rotated_iou(a, g);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
            if iou > per_gt_best[gi].0 {
                per_gt_best[gi] = (iou, ai);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best_iou
        .iter()
        .zip(&best_gt)
        .map(|(&iou, &gi)| {
            if iou >= cfg.positive_iou {
                AnchorLabel::Positive { target: gi }
            } else if iou <= cfg.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (gi, &(iou, ai)) in per_gt_best.iter().enumerate() {
        if iou > 0.0 {
            labels[ai] = AnchorLabel::Positive { target: gi };
        }
    }
    labels
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal loss terms and their derivatives for one logit.
fn focal(x: f64, positive: bool) -> (f64, f64) {
    let p = crate::autodiff::sigmoid(x);
    if positive {
        let logp = -softplus(-x);
        let w = (1.0 - p).powf(FOCAL_GAMMA);
        (-FOCAL_ALPHA * w * logp, FOCAL_ALPHA * w * (FOCAL_GAMMA * p * logp - (1.0 - p)))
    } else {
        let log1mp = -softplus(x);
        let w = p.powf(FOCAL_GAMMA);
        (-(1.0 - FOCAL_ALPHA) * w * log1mp, (1.0 - FOCAL_ALPHA) * w * (p - FOCAL_GAMMA * (1.0 - p) * log1mp))
    }
}

struct FocalBackward {
    labels: Vec<Option<bool>>,
    norm: f64,
}

impl Backward for FocalBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.item() / self.norm;
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&x, l)| l.map_or(0.0, |pos| g * focal(x, pos).1))
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

/// Sum of focal terms over labelled logits, divided by `norm`.
/// `labels[i]`: `Some(true)` positive, `Some(false)` negative, `None` ignored.
pub fn focal_loss<'g>(logits: Value<'g>, labels: &[Option<bool>], norm: f64) -> Value<'g> {
    let t = logits.tensor();
    let total: f64 = t.data().iter().zip(labels).map(|(&x, l)| l.map_or(0.0, |pos| focal(x, pos).0)).sum();
    logits.graph().record(&[logits], Tensor::scalar(total / norm), FocalBackward { labels: labels.to_vec(), norm })
}

struct SmoothL1Backward {
    beta: f64,
}

impl Backward for SmoothL1Backward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let d = inputs[0]
            .data()
            .iter()
            .map(|&x| g * if x.abs() < self.beta { x / self.beta } else { x.signum() })
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

/// `sum_i smoothL1(x_i)` with quadratic zone `|x| < beta`.
pub fn smooth_l1_sum(x: Value<'_>, beta: f64) -> Value<'_> {
    let total: f64 = x
        .tensor()
        .data()
        .iter()
        .map(|&v| if v.abs() < beta { 0.5 * v * v / beta } else { v.abs() - 0.5 * beta })
        .sum();
    x.graph().record(&[x], Tensor::scalar(total), SmoothL1Backward { beta })
}

/// Classification plus regression loss for one scene, normalized by the
/// number of positive anchors (at least one).
pub fn task_loss<'g>(proposals: &Proposals<'g>, gt: &[DetectionBox], cfg: &DetectorConfig) -> Result<Value<'g>> {
    let anchors = anchors(cfg);
    let labels = assign_anchors(&anchors, gt, cfg);
    let cls: Vec<Option<bool>> = labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Positive { .. } => Some(true),
            AnchorLabel::Negative => Some(false),
            AnchorLabel::Ignore => None,
        })
        .collect();
    let positives: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            AnchorLabel::Positive { target } => Some((i, *target)),
            _ => None,
        })
        .collect();
    let norm = positives.len().max(1) as f64;
    let loss = focal_loss(proposals.logits, &cls, norm);
    if positives.is_empty() {
        return Ok(loss);
    }
    let cells = cfg.nx() * cfg.ny();
    let mut idx = Vec::with_capacity(5 * positives.len());
    let mut targets = Vec::with_capacity(5 * positives.len());
    for &(i, gi) in &positives {
        let (ai, cell) = (i / cells, i % cells);
        idx.extend((0..5).map(|k| (5 * ai + k) * cells + cell));
        targets.extend(encode(&anchors[i], &gt[gi]));
    }
    let g = proposals.logits.graph();
    let diff = proposals.regression.gather(&idx)?.sub(g.constant(Tensor::from_vec(targets)))?;
    let reg = smooth_l1_sum(diff, SMOOTH_L1_BETA).scale(REGRESSION_WEIGHT / norm);
    loss.add(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn focal_gradient() {
        let x = Tensor::from_vec(vec![-3.0, -0.5, 0.2, 1.5, 4.0, 0.0]);
        let labels = vec![Some(true), Some(false), Some(true), Some(false), None, Some(true)];
        let r = grad_check(|_, v| Ok(focal_loss(v, &labels, 3.0)), &x, 1e-6, 1e-7).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn saturated_perfect_scores_give_tiny_loss() {
        let g = crate::autodiff::Graph::new();
        let x = g.constant(Tensor::from_vec(vec![20.0, -20.0, -20.0]));
        let l = focal_loss(x, &[Some(true), Some(false), Some(false)], 1.0);
        assert!(l.item() < 1e-2);
        let empty = focal_loss(x.neg().add_scalar(-40.0), &[Some(false); 3], 1.0);
        assert!(empty.item() < 1e-20);
    }

    #[test]
    fn smooth_l1_values_and_gradient() {
        let g = crate::autodiff::Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.05, -2.0]));
        let v = smooth_l1_sum(x, 0.1).item();
        assert!((v - (0.5 * 0.0025 / 0.1 + 1.95)).abs() < 1e-12);
        let t = Tensor::from_vec(vec![0.03, -0.07, 0.4, -1.2]);
        let r = grad_check(|_, v| Ok(smooth_l1_sum(v, 0.1)), &t, 1e-6, 1e-7).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn assignment_forces_best_anchor() {
        let cfg = DetectorConfig::micro();
        let a = anchors(&cfg);
        // rotated 45 degrees: no anchor reaches the positive threshold
        let gt = [DetectionBox::new(4.0, 0.0, 4.4, 1.8, std::f64::consts::FRAC_PI_4, 1.0)];
        let labels = assign_anchors(&a, &gt, &cfg);
        let pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive { .. })).count();
        assert_eq!(pos, 1);
        let aligned = [DetectionBox::new(4.5, 0.5, 4.4, 1.8, 0.0, 1.0)];
        let labels = assign_anchors(&a, &aligned, &cfg);
        let exact = labels
            .iter()
            .zip(&a)
            .find(|(_, an)| rotated_iou(an, &aligned[0]) > 0.999)
            .unwrap();
        assert_eq!(*exact.0, AnchorLabel::Positive { target: 0 });
        assert!(assign_anchors(&a, &[], &cfg).iter().all(|l| *l == AnchorLabel::Negative));
    }
}
