//! Detection and attack metrics: rotated IoU, host recall across IoU
//! thresholds, attack success rates and average precision.

mod iou;
mod report;

use serde::{Deserialize, Serialize};

use crate::detector::DetectionBox;
use crate::error::{Error, Result};

pub use iou::{intersection_area, rotated_iou};
pub use report::{write_report, write_summary_csv, EvalReport, SummaryRow};

/// IoU at which a host counts as detected (inclusive).
pub const DETECTED_IOU: f64 = 0.7;
/// A post-attack detection is a false positive below this ground-truth IoU.
pub const FP_MAX_GT_IOU: f64 = 0.3;

/// Whether some detection overlaps `host` with IoU at least `threshold`.
pub fn host_detected(detections: &[DetectionBox], host: &DetectionBox, threshold: f64) -> bool {
    detections.iter().any(|d| rotated_iou(d, host) >= threshold)
}

/// Post-attack detection whose best ground-truth IoU is below
/// [`FP_MAX_GT_IOU`] and that overlaps no pre-attack detection.
pub fn is_false_positive(det: &DetectionBox, ground_truth: &[DetectionBox], before: &[DetectionBox]) -> bool {
    ground_truth.iter().all(|g| rotated_iou(det, g) < FP_MAX_GT_IOU)
        && before.iter().all(|b| intersection_area(det, b) == 0.0)
}

/// One attack: a host vehicle in a scene, detections before and after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: usize,
    pub host: usize,
    pub host_box: DetectionBox,
    pub ground_truth: Vec<DetectionBox>,
    pub before: Vec<DetectionBox>,
    pub after: Vec<DetectionBox>,
    pub detected_before: bool,
    pub detected_after: bool,
    pub false_positive: bool,
}

impl EvalRecord {
    pub fn new(
        scene: usize,
        host: usize,
        host_box: DetectionBox,
        ground_truth: Vec<DetectionBox>,
        before: Vec<DetectionBox>,
        after: Vec<DetectionBox>,
    ) -> Self {
        let mut r = EvalRecord {
            scene,
            host,
            host_box,
            ground_truth,
            before,
            after,
            detected_before: false,
            detected_after: false,
            false_positive: false,
        };
        r.rederive();
        r
    }

    /// Recomputes the flags from the stored detections.
    pub fn rederive(&mut self) {
        self.detected_before = host_detected(&self.before, &self.host_box, DETECTED_IOU);
        self.detected_after = host_detected(&self.after, &self.host_box, DETECTED_IOU);
        self.false_positive = self.after.iter().any(|d| is_false_positive(d, &self.ground_truth, &self.before));
    }

    pub fn false_negative(&self) -> bool {
        self.detected_before && !self.detected_after
    }
}

/// Percentages; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRates {
    pub fn_asr: Option<f64>,
    pub fp_asr: Option<f64>,
    pub asr: Option<f64>,
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// FN ASR over hosts detected before the attack; FP ASR and ASR over all
/// attacks.
pub fn attack_success_rates(records: &[EvalRecord]) -> AttackRates {
    let detected = records.iter().filter(|r| r.detected_before).count();
    let fns = records.iter().filter(|r| r.false_negative()).count();
    let fps = records.iter().filter(|r| r.false_positive).count();
    let any = records.iter().filter(|r| r.false_negative() || r.false_positive).count();
    AttackRates { fn_asr: percent(fns, detected), fp_asr: percent(fps, records.len()), asr: percent(any, records.len()) }
}

/// `(threshold, fraction of hosts with a post-attack detection at IoU >= threshold)`.
pub fn recall_curve(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::invalid("recall curve needs at least one record"));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hit = records.iter().filter(|r| host_detected(&r.after, &r.host_box, t)).count();
            (t, hit as f64 / records.len() as f64)
        })
        .collect())
}

/// 41-point interpolated AP over frames of `(detections, ground truth)`,
/// greedy score-ordered matching at `iou_threshold`. `None` without ground
/// truth.
pub fn average_precision(frames: &[(Vec<DetectionBox>, Vec<DetectionBox>)], iou_threshold: f64) -> Option<f64> {
    let total_gt: usize = frames.iter().map(|f| f.1.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (fi, (dets, _)) in frames.iter().enumerate() {
        ranked.extend(dets.iter().enumerate().map(|(di, d)| (d.score, fi, di)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.1.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, &(_, fi, di)) in ranked.iter().enumerate() {
        let det = &frames[fi].0[di];
        let best = frames[fi]
            .1
            .iter()
            .enumerate()
            .filter(|(gi, _)| !matched[fi][*gi])
            .map(|(gi, g)| (rotated_iou(det, g), gi))
            .filter(|(iou, _)| *iou >= iou_threshold)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, gi)) = best {
            matched[fi][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let ap = (0..41)
        .map(|i| {
            let r = i as f64 / 40.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 41.0;
    Some(ap)
}
