//! Free adversarial training: one persistent adversary keeps being updated
//! against the current model while the model trains on clean and perturbed
//! scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_step, initial_mesh, Adversary, AttackConfig, AttackSet};
use crate::autodiff::Graph;
use crate::detector::{train_step, DetectorParams, SampleInputs};
use crate::error::{Error, Result};
use crate::geometry::TexturedMesh;
use crate::harness::{insert_adversary, HostContext, Modalities, Scene};
use crate::optim::Adam;
use crate::par;

/// Parameter-name prefix of the image non-local block.
const NONLOCAL_PREFIX: &str = "img.nl.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Compression,
    AdvTrain,
    AdvTrainFd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// JPEG-style quality for the compression defense.
    pub compression_quality: u32,
    pub adversary_updates_per_model_update: usize,
    /// Backbone stages followed by a non-local block (the image branch has a
    /// single residual stage, index 0).
    pub denoise_block_positions: Vec<usize>,
    /// Learning-rate multiplier for the newly added non-local weights.
    pub denoise_lr_scale: f64,
    pub model_steps: usize,
    pub model_lr: f64,
    /// Clean scenes per model step; the same number of perturbed ones is added.
    pub model_batch: usize,
    /// Hosts per adversary step.
    pub adversary_batch: usize,
    /// Draw fresh hosts for the perturbed half of every model batch.
    pub resample_hosts: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::AdvTrain,
            compression_quality: 30,
            adversary_updates_per_model_update: 5,
            denoise_block_positions: vec![0],
            denoise_lr_scale: 10.0,
            model_steps: 100,
            model_lr: 5e-4,
            model_batch: 2,
            adversary_batch: 2,
            resample_hosts: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.compression_quality) {
            return Err(Error::invalid(format!("compression quality {} outside 1..=100", self.compression_quality)));
        }
        if self.model_steps == 0 || self.model_batch == 0 || self.adversary_batch == 0 || !(self.model_lr >= 0.0) || !(self.denoise_lr_scale >= 0.0) {
            return Err(Error::invalid("defense needs positive model steps and batch sizes"));
        }
        if self.denoise_block_positions.iter().any(|&p| p != 0) {
            return Err(Error::invalid("the image backbone has one residual stage; only position 0 exists"));
        }
        Ok(())
    }
}

/// Order of updates performed by [`free_adv_train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    Adversary,
    Model,
}

#[derive(Clone, Debug)]
pub struct DefenseRun {
    pub params: DetectorParams,
    pub mesh: TexturedMesh,
    /// Mean task loss of every model step.
    pub model_losses: Vec<f64>,
    pub updates: Vec<Update>,
}

fn perturbed(scene: &Scene, host: &HostContext, mesh: &TexturedMesh, cfg: &AttackConfig) -> Result<SampleInputs> {
    let g = Graph::new();
    let ins = insert_adversary(
        scene,
        host,
        g.constant(mesh.vertex_tensor()),
        g.constant(mesh.texture_tensor()),
        mesh.faces(),
        &cfg.bounds,
        Modalities::BOTH,
        &cfg.raster,
    )?;
    Ok(SampleInputs {
        image: (*ins.image.tensor()).clone(),
        points: ins.points.map(|p| (*p.tensor()).clone()),
        camera: scene.camera.clone(),
        targets: scene.ground_truth(),
    })
}

/// Alternates `k` adversary steps (model frozen) with one model step on
/// `model_batch` clean plus `model_batch` perturbed scenes (mesh frozen).
/// Non-local blocks are added first for [`DefenseKind::AdvTrainFd`].
pub fn free_adv_train(
    train: &AttackSet,
    params: &DetectorParams,
    attack: &AttackConfig,
    defense: &DefenseConfig,
    seed: u64,
) -> Result<DefenseRun> {
    defense.validate()?;
    attack.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("adversarial training needs hosts"));
    }
    let added = defense.kind == DefenseKind::AdvTrainFd && !params.config.nonlocal;
    let mut params = if added { params.with_nonlocal(seed)? } else { params.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adv = Adversary::new(initial_mesh(attack), attack);
    let mut opt = Adam::new(defense.model_lr);
    if added {
        opt.lr_scale = params.names().map(|n| if n.starts_with(NONLOCAL_PREFIX) { defense.denoise_lr_scale } else { 1.0 }).collect();
    }
    let mut losses = Vec::with_capacity(defense.model_steps);
    let mut updates = Vec::new();
    let mut fixed_hosts: Option<Vec<usize>> = None;
    for _ in 0..defense.model_steps {
        for _ in 0..defense.adversary_updates_per_model_update {
            let batch: Vec<_> = (0..defense.adversary_batch).map(|_| train.sample(rng.gen_range(0..train.len()))).collect();
            attack_step(&mut adv, &batch, &params, attack)?;
            updates.push(Update::Adversary);
        }
        let hosts: Vec<usize> = match (&fixed_hosts, defense.resample_hosts) {
            (Some(h), false) => h.clone(),
            _ => (0..defense.model_batch).map(|_| rng.gen_range(0..train.len())).collect(),
        };
        if !defense.resample_hosts {
            fixed_hosts = Some(hosts.clone());
        }
        let clean: Vec<usize> = (0..defense.model_batch).map(|_| rng.gen_range(0..train.scenes.len())).collect();
        let mesh = &adv.mesh;
        let mut batch: Vec<SampleInputs> = clean.iter().map(|&i| train.scenes[i].training_sample()).collect();
        let pert: Result<Vec<SampleInputs>> = par::map(&hosts, |&k| {
            let (s, h) = train.sample(k);
            perturbed(s, h, mesh, attack)
        })
        .into_iter()
        .collect();
        batch.extend(pert?);
        losses.push(train_step(&mut params, &mut opt, &batch)?);
        updates.push(Update::Model);
    }
    Ok(DefenseRun { params, mesh: adv.mesh, model_losses: losses, updates })
}
