//! Adversarial objectives against the fusion detector and the universal
//! rooftop-mesh attack.

mod run;

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::camera::SoftRasterConfig;
use crate::detector::DetectionBox;
use crate::error::{Error, Result};
use crate::eval::rotated_iou;
use crate::geometry::BoxConstraint;
use crate::harness::Modalities;
use crate::tensor::Tensor;

pub use run::{
    attack_step, clean_detections, evaluate_adversary, initial_mesh, random_mesh, run_universal_attack, sample_loss, write_attack_log,
    Adversary, AttackLogRow, AttackRun, AttackSet, SampleLoss, StepReport,
};

/// Scores are kept inside `[SCORE_CLIP, 1 - SCORE_CLIP]` before taking logs.
pub const SCORE_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub lambda_fp: f64,
    pub lambda_lap: f64,
    pub lr_texture: f64,
    pub lr_vertex: f64,
    #[serde(rename = "box")]
    pub bounds: BoxConstraint,
    pub target_modalities: Vec<Modality>,
    pub steps: usize,
    pub relevance_score_min: f64,
    pub relevance_requires_overlap: bool,
    /// Scenes per step, drawn uniformly with replacement.
    pub batch_size: usize,
    /// Validation ASR is logged every this many steps (and after the last).
    pub val_every: usize,
    pub icosphere_subdivisions: usize,
    pub texture_res: usize,
    pub seed: u64,
    pub raster: SoftRasterConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda_fp: 1.0,
            lambda_lap: 0.001,
            lr_texture: 0.004,
            lr_vertex: 0.001,
            bounds: BoxConstraint::default(),
            target_modalities: vec![Modality::Lidar, Modality::Image],
            steps: 200,
            relevance_score_min: 0.1,
            relevance_requires_overlap: true,
            batch_size: 4,
            val_every: 25,
            icosphere_subdivisions: 2,
            texture_res: 2,
            seed: 0,
            raster: SoftRasterConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_fp, self.lambda_lap, self.lr_texture, self.lr_vertex, self.relevance_score_min];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("attack weights and learning rates must be nonnegative"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 || self.texture_res == 0 {
            return Err(Error::invalid("attack steps, batch size, validation interval and texture size must be positive"));
        }
        BoxConstraint::new(self.bounds.lx, self.bounds.ly, self.bounds.lz)?;
        self.raster.validate()?;
        gate_modality(self).map(|_| ())
    }
}

/// Which input branches pass gradients to the mesh. Both modalities are
/// always rendered; untargeted ones only see detached inputs.
pub fn gate_modality(cfg: &AttackConfig) -> Result<Modalities> {
    if cfg.target_modalities.is_empty() {
        return Err(Error::invalid("attack needs at least one target modality"));
    }
    Ok(Modalities {
        lidar: cfg.target_modalities.contains(&Modality::Lidar),
        image: cfg.target_modalities.contains(&Modality::Image),
    })
}

/// Proposals scoring above `score_min` that overlap the host box, as
/// `(index, IoU with host)`. Without `requires_overlap`, every proposal above
/// the score floor counts.
pub fn relevant_proposals(proposals: &[DetectionBox], host: &DetectionBox, score_min: f64, requires_overlap: bool) -> Vec<(usize, f64)> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, b)| b.score > score_min)
        .filter_map(|(i, b)| {
            let iou = rotated_iou(b, host);
            (!requires_overlap || iou > 0.0).then_some((i, iou))
        })
        .collect()
}

/// `log(1 - s)` on gathered scores, clipped away from 0 and 1.
fn log_one_minus<'g>(scores: Value<'g>, idx: &[usize], what: &str) -> Result<Value<'g>> {
    let s = scores.gather(idx)?;
    let t = s.tensor();
    if t.data().iter().any(|v| *v > 1.0 - SCORE_CLIP || *v < SCORE_CLIP) {
        log::warn!("{what}: score clipped to [{SCORE_CLIP}, 1 - {SCORE_CLIP}]");
    }
    Ok(s.clamp(SCORE_CLIP, 1.0 - SCORE_CLIP).neg().add_scalar(1.0).log())
}

/// False-negative objective `sum -IoU * log(1 - score)` over the relevant
/// proposals; the IoU weights are constants. Zero for an empty set.
pub fn loss_fn<'g>(scores: Value<'g>, relevant: &[(usize, f64)]) -> Result<Value<'g>> {
    let g = scores.graph();
    if relevant.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = relevant.iter().map(|r| r.0).collect();
    let w = Tensor::from_vec(relevant.iter().map(|r| -r.1).collect());
    Ok(log_one_minus(scores, &idx, "loss_fn")?.mul(g.constant(w))?.sum())
}

/// Proposals with zero IoU against every ground-truth box.
pub fn false_positive_candidates(proposals: &[DetectionBox], ground_truth: &[DetectionBox]) -> Vec<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, b)| ground_truth.iter().all(|g| rotated_iou(b, g) == 0.0))
        .map(|(i, _)| i)
        .collect()
}

/// False-positive objective `sum log(1 - score)` over the candidates;
/// minimizing it raises their scores. Zero for an empty set.
pub fn loss_fp<'g>(scores: Value<'g>, candidates: &[usize]) -> Result<Value<'g>> {
    if candidates.is_empty() {
        return Ok(scores.graph().constant(Tensor::scalar(0.0)));
    }
    Ok(log_one_minus(scores, candidates, "loss_fp")?.sum())
}
