//! Experiment stages shared by the CLI and the acceptance suite.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scenes, ExperimentConfig, Scene, Stage};
use crate::attack::{clean_detections, evaluate_adversary, AttackConfig, AttackSet};
use crate::defense::dct_compress;
use crate::detector::{detect_boxes, train_step, DetectionBox, DetectorParams, SampleInputs};
use crate::error::{Error, Result};
use crate::eval::{attack_success_rates, average_precision, recall_curve, EvalRecord, SummaryRow};
use crate::geometry::TexturedMesh;
use crate::optim::Adam;
use crate::par;
use crate::tensor::Tensor;

/// Detections down to this score feed the precision/recall curve.
pub const AP_SCORE_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// Train, validation and evaluation scenes with disjoint ids.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.dataset;
    let seed = cfg.stage_seed(Stage::Dataset);
    Ok(Datasets {
        train: generate_scenes(&d.scene, d.train_scenes, seed, 0)?,
        val: generate_scenes(&d.scene, d.val_scenes, seed, d.train_scenes)?,
        eval: generate_scenes(&d.scene, d.eval_scenes, seed, d.train_scenes + d.val_scenes)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean task loss over the steps since the previous row.
    pub loss: f64,
}

/// Left-right mirror of a training sample (image columns reversed, `y` and
/// headings negated). `None` unless the camera is symmetric about the
/// sensor's forward axis.
pub fn mirror_sample(s: &SampleInputs) -> Option<SampleInputs> {
    let c = &s.camera;
    let symmetric = c.translation[0].abs() < 1e-12 && (c.cx - c.width as f64 / 2.0).abs() < 1e-12 && c.rotation == MIRROR_SAFE_ROTATION;
    if !symmetric {
        return None;
    }
    let (h, w) = (c.height, c.width);
    let src = s.image.data();
    let mut img = vec![0.0; src.len()];
    for ch in 0..3 {
        for r in 0..h {
            for col in 0..w {
                img[(ch * h + r) * w + col] = src[(ch * h + r) * w + (w - 1 - col)];
            }
        }
    }
    let points = s.points.as_ref().map(|p| {
        let mut q = p.clone();
        q.data_mut().chunks_mut(3).for_each(|v| v[1] = -v[1]);
        q
    });
    let targets = s
        .targets
        .iter()
        .map(|b| DetectionBox { y: -b.y, heading: crate::geometry::normalize_angle(-b.heading), ..*b })
        .collect();
    Some(SampleInputs { image: Tensor::from_parts(s.image.shape().to_vec(), img), points, camera: c.clone(), targets })
}

/// Forward-facing camera rotation (x right, y down, z forward).
const MIRROR_SAFE_ROTATION: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];

/// Adam on minibatches drawn with replacement, each sample mirrored with
/// probability one half; the learning rate decays linearly to a tenth over
/// the last quarter of the run.
pub fn train_detector(cfg: &ExperimentConfig, scenes: &[Scene], mut observe: impl FnMut(&TrainLogRow)) -> Result<(DetectorParams, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    let t = &cfg.training;
    let seed = cfg.stage_seed(Stage::Detector);
    let mut params = DetectorParams::init(&cfg.detector, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(t.lr);
    let decay_from = t.steps * 3 / 4;
    let (mut acc, mut n, mut log) = (0.0, 0usize, Vec::new());
    for step in 1..=t.steps {
        if step > decay_from {
            let f = (step - decay_from) as f64 / (t.steps - decay_from) as f64;
            opt.lr = t.lr * (1.0 - 0.9 * f);
        }
        let batch: Vec<SampleInputs> = (0..t.batch_size)
            .map(|_| {
                let s = scenes[rng.gen_range(0..scenes.len())].training_sample();
                if rng.gen_bool(0.5) {
                    mirror_sample(&s).unwrap_or(s)
                } else {
                    s
                }
            })
            .collect();
        acc += train_step(&mut params, &mut opt, &batch)?;
        n += 1;
        if step % t.log_every == 0 || step == t.steps {
            let row = TrainLogRow { step, loss: acc / n as f64 };
            observe(&row);
            log.push(row);
            (acc, n) = (0.0, 0);
        }
    }
    Ok((params, log))
}

pub fn write_train_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?}", r.step, r.loss);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Clean average precision at each IoU threshold, optionally on
/// compressed images.
pub fn clean_ap(params: &DetectorParams, scenes: &[Scene], iou: &[f64], compression: Option<u32>) -> Result<Vec<f64>> {
    let frames: Vec<(Vec<DetectionBox>, Vec<DetectionBox>)> = par::map(scenes, |s| {
        let img = match compression {
            Some(q) => dct_compress(&s.image, q)?,
            None => s.image.clone(),
        };
        Ok((detect_boxes(params, &img, s.points().as_ref(), &s.camera, AP_SCORE_FLOOR)?, s.ground_truth()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    iou.iter()
        .map(|&t| average_precision(&frames, t).ok_or_else(|| Error::invalid("evaluation scenes have no vehicles")))
        .collect()
}

/// Records for one mesh (or none) on an evaluation set plus its summary row.
pub fn evaluate_mesh(
    label: &str,
    set: &AttackSet,
    params: &DetectorParams,
    mesh: Option<&TexturedMesh>,
    attack: &AttackConfig,
    compression: Option<u32>,
    recall_iou: &[f64],
) -> Result<(SummaryRow, Vec<EvalRecord>)> {
    let before = clean_detections(&set.scenes, params, compression)?;
    let records = evaluate_adversary(set, params, mesh, &attack.bounds, &attack.raster, compression, &before)?;
    let row = SummaryRow {
        label: label.to_string(),
        rates: attack_success_rates(&records),
        recall: recall_curve(&records, recall_iou)?,
        ap: None,
    };
    Ok((row, records))
}
