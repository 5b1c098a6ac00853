//! Experiment configuration and seed handling.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SceneConfig;
use crate::attack::AttackConfig;
use crate::defense::DefenseConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

/// Environment variable that replaces [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "ADVFUSION_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { scene: SceneConfig::default(), train_scenes: 384, val_scenes: 8, eval_scenes: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training loss is logged every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 4000, batch_size: 2, lr: 2e-3, log_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU thresholds reported for average precision.
    pub ap_iou: Vec<f64>,
    /// Ascending IoU thresholds of the host recall curve.
    pub recall_iou: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ap_iou: vec![0.5, 0.7], recall_iou: (1..=9).map(|i| i as f64 / 10.0).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub training: TrainConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub eval: EvalConfig,
    /// Root seed; per-stage seeds are derived from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            training: TrainConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            eval: EvalConfig::default(),
            seed: 7,
        }
    }
}

/// Pipeline stages with independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    Detector,
    Attack,
    Baseline,
    Defense,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.detector.validate()?;
        self.attack.validate()?;
        self.defense.validate()?;
        if self.detector.image_size != self.dataset.scene.image_size {
            return Err(Error::invalid(format!(
                "detector expects {:?} images, scenes render {:?}",
                self.detector.image_size, self.dataset.scene.image_size
            )));
        }
        if self.training.steps == 0 || self.training.batch_size == 0 || self.training.log_every == 0 || !(self.training.lr >= 0.0) {
            return Err(Error::invalid("training needs positive steps, batch size and log interval"));
        }
        if self.dataset.train_scenes == 0 || self.dataset.eval_scenes == 0 {
            return Err(Error::invalid("need training and evaluation scenes"));
        }
        if self.eval.recall_iou.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("recall thresholds must be ascending"));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let k = match stage {
            Stage::Dataset => 1,
            Stage::Detector => 2,
            Stage::Attack => 3,
            Stage::Baseline => 4,
            Stage::Defense => 5,
        };
        self.seed.wrapping_mul(1_000_003).wrapping_add(k)
    }

    /// Applies `ADVFUSION_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    /// Second sensor setup for transfer runs: fewer LiDAR beams and a longer
    /// focal length, same image size.
    pub fn transfer_variant(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let s = &mut c.dataset.scene;
        let b = &s.lidar.beam_elevations;
        let (lo, hi) = (b[0], b[b.len() - 1]);
        let n = (b.len() * 3 / 4).max(2);
        s.lidar.beam_elevations = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        s.intrinsics[0] *= 1.15;
        s.intrinsics[1] *= 1.15;
        c.seed = self.seed.wrapping_add(0x5EED);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.transfer_variant().validate().unwrap();
    }

    #[test]
    fn stage_seeds_differ() {
        let c = ExperimentConfig::default();
        let s = [Stage::Dataset, Stage::Detector, Stage::Attack, Stage::Baseline, Stage::Defense].map(|st| c.stage_seed(st));
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn mismatched_image_size_rejected() {
        let mut c = ExperimentConfig::default();
        c.detector.image_size = [32, 32];
        assert!(c.validate().is_err());
    }
}
