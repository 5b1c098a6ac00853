use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{false_positive_candidates, gate_modality, loss_fn, loss_fp, relevant_proposals, AttackConfig};
use crate::autodiff::Graph;
use crate::defense::dct_compress;
use crate::detector::{detect_boxes, forward, DetectionBox, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{attack_success_rates, EvalRecord};
use crate::geometry::{clamp_texels, clamp_vertices, laplacian_loss, make_icosphere, BoxConstraint, TexturedMesh};
use crate::harness::{insert_adversary, HostContext, Modalities, Scene};
use crate::optim::Adam;
use crate::par;
use crate::tensor::Tensor;

/// Scenes plus every vehicle that can host an adversary.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSet {
    pub scenes: Vec<Scene>,
    /// `(position in scenes, host)`
    pub hosts: Vec<(usize, HostContext)>,
}

impl AttackSet {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        let pairs: Vec<(usize, usize)> =
            scenes.iter().enumerate().flat_map(|(i, s)| (0..s.vehicles.len()).map(move |v| (i, v))).collect();
        let found = par::map(&pairs, |&(i, v)| HostContext::new(&scenes[i], v));
        let mut hosts = Vec::new();
        for (&(i, _), h) in pairs.iter().zip(found) {
            if let Some(h) = h? {
                hosts.push((i, h));
            }
        }
        Ok(AttackSet { scenes, hosts })
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn sample(&self, k: usize) -> (&Scene, &HostContext) {
        let (i, h) = &self.hosts[k];
        (&self.scenes[*i], h)
    }
}

/// Icosphere scaled to touch the constraint box, mid-gray.
pub fn initial_mesh(cfg: &AttackConfig) -> TexturedMesh {
    let m = make_icosphere(cfg.icosphere_subdivisions, cfg.texture_res);
    let l = cfg.bounds.limits();
    let v = m.vertices().iter().map(|p| [p[0] * l[0], p[1] * l[1], p[2] * l[2]]).collect();
    clamp_vertices(&m.with_vertices(v).expect("same vertex count"), &cfg.bounds)
}

/// Random star-shaped geometry inside the box with uniform random texels.
pub fn random_mesh(cfg: &AttackConfig, seed: u64) -> TexturedMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = initial_mesh(cfg);
    let v = m
        .vertices()
        .iter()
        .map(|p| {
            let r = rng.gen_range(0.3..1.0);
            [p[0] * r, p[1] * r, p[2] * r]
        })
        .collect();
    let t = (0..m.textures().len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    m.with_vertices(v).and_then(|m| m.with_textures(t)).expect("same sizes")
}

/// The optimized mesh with one Adam state per parameter group.
#[derive(Clone, Debug)]
pub struct Adversary {
    pub mesh: TexturedMesh,
    opt_vertices: Adam,
    opt_textures: Adam,
}

impl Adversary {
    pub fn new(mesh: TexturedMesh, cfg: &AttackConfig) -> Self {
        Adversary { mesh, opt_vertices: Adam::new(cfg.lr_vertex), opt_textures: Adam::new(cfg.lr_texture) }
    }
}

/// One scene's objective terms and their mesh gradients.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub l_fn: f64,
    pub l_fp: f64,
    pub grad_vertices: Tensor,
    pub grad_textures: Tensor,
}

/// `L_fn + lambda_fp * L_fp` for one host, differentiated with respect to the
/// local mesh through the gated insertion and the frozen detector.
pub fn sample_loss(
    scene: &Scene,
    host: &HostContext,
    mesh: &TexturedMesh,
    params: &DetectorParams,
    cfg: &AttackConfig,
    grad_to: Modalities,
) -> Result<SampleLoss> {
    let g = Graph::new();
    let v = g.param(mesh.vertex_tensor());
    let t = g.param(mesh.texture_tensor());
    let ins = insert_adversary(scene, host, v, t, mesh.faces(), &cfg.bounds, grad_to, &cfg.raster)?;
    let p = params.bind(&g, false);
    let prop = forward(ins.image, ins.points, &scene.camera, &p, &params.config)?;
    let host_box = scene.vehicles[host.host].bev;
    let rel = relevant_proposals(&prop.boxes, &host_box, cfg.relevance_score_min, cfg.relevance_requires_overlap);
    let l_fn = loss_fn(prop.scores, &rel)?;
    let l_fp = loss_fp(prop.scores, &false_positive_candidates(&prop.boxes, &scene.ground_truth()))?;
    let total = l_fn.add(l_fp.scale(cfg.lambda_fp))?;
    let (vf, vp) = (l_fn.item(), l_fp.item());
    if !(vf.is_finite() && vp.is_finite()) {
        return Err(Error::NonFinite(format!("attack loss (fn {vf}, fp {vp})")));
    }
    g.backward(total)?;
    Ok(SampleLoss {
        l_fn: vf,
        l_fp: vp,
        grad_vertices: g.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape())),
        grad_textures: g.grad(t).unwrap_or_else(|| Tensor::zeros(&t.shape())),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub l_fn: f64,
    pub l_fp: f64,
    pub l_lap: f64,
    /// Non-finite objective: the mesh was left untouched.
    pub skipped: bool,
}

/// One projected Adam step on the batch-mean objective plus the Laplacian
/// term, then projection onto the box and texel constraints.
pub fn attack_step(adv: &mut Adversary, batch: &[(&Scene, &HostContext)], params: &DetectorParams, cfg: &AttackConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty attack batch"));
    }
    let grad_to = gate_modality(cfg)?;
    let mesh = &adv.mesh;
    let results = par::map(batch, |(s, h)| sample_loss(s, h, mesh, params, cfg, grad_to));
    let n = batch.len() as f64;
    let mut gv = Tensor::zeros(&[mesh.vertices().len(), 3]);
    let mut gt = Tensor::zeros(&mesh.texture_tensor().shape().to_vec());
    let (mut l_fn, mut l_fp) = (0.0, 0.0);
    for r in results {
        match r {
            Ok(r) => {
                l_fn += r.l_fn / n;
                l_fp += r.l_fp / n;
                gv.add_assign(&r.grad_vertices);
                gt.add_assign(&r.grad_textures);
            }
            Err(Error::NonFinite(msg)) => {
                log::warn!("attack step skipped: {msg}");
                return Ok(StepReport { l_fn: f64::NAN, l_fp: f64::NAN, l_lap: f64::NAN, skipped: true });
            }
            Err(e) => return Err(e),
        }
    }
    gv.scale_inplace(1.0 / n);
    gt.scale_inplace(1.0 / n);
    let g = Graph::new();
    let v = g.param(mesh.vertex_tensor());
    let lap = laplacian_loss(mesh, v)?;
    let l_lap = lap.item();
    g.backward(lap.scale(cfg.lambda_lap))?;
    if let Some(lg) = g.grad(v) {
        gv.add_assign(&lg);
    }
    if !(gv.all_finite() && gt.all_finite() && l_lap.is_finite()) {
        log::warn!("attack step skipped: non-finite gradient");
        return Ok(StepReport { l_fn, l_fp, l_lap, skipped: true });
    }
    let mut vt = mesh.vertex_tensor();
    let mut tt = Tensor::from_vec(mesh.textures().to_vec());
    let gt = gt.reshape(&[tt.numel()])?;
    adv.opt_vertices.update(&mut [&mut vt], &[&gv])?;
    adv.opt_textures.update(&mut [&mut tt], &[&gt])?;
    // texels are validated on construction, so project them first
    clamp_texels(tt.data_mut());
    let moved = mesh.from_vertex_tensor(&vt)?.with_textures(tt.into_data())?;
    adv.mesh = clamp_vertices(&moved, &cfg.bounds);
    Ok(StepReport { l_fn, l_fp, l_lap, skipped: false })
}

/// Clean thresholded detections per scene.
pub fn clean_detections(scenes: &[Scene], params: &DetectorParams, compression: Option<u32>) -> Result<Vec<Vec<DetectionBox>>> {
    par::map(scenes, |s| {
        let img = match compression {
            Some(q) => dct_compress(&s.image, q)?,
            None => s.image.clone(),
        };
        detect_boxes(params, &img, s.points().as_ref(), &s.camera, params.config.score_threshold)
    })
    .into_iter()
    .collect()
}

/// Before/after records for every host. `before` holds the clean detections
/// of each scene; without a mesh the scene is left untouched.
pub fn evaluate_adversary(
    set: &AttackSet,
    params: &DetectorParams,
    mesh: Option<&TexturedMesh>,
    bounds: &BoxConstraint,
    raster: &crate::camera::SoftRasterConfig,
    compression: Option<u32>,
    before: &[Vec<DetectionBox>],
) -> Result<Vec<EvalRecord>> {
    if before.len() != set.scenes.len() {
        return Err(Error::invalid("clean detections must cover every scene"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    par::map(&idx, |&k| {
        let (scene, host) = set.sample(k);
        let pre = before[set.hosts[k].0].clone();
        let after = match mesh {
            None => pre.clone(),
            Some(m) => {
                let g = Graph::new();
                let ins = insert_adversary(
                    scene,
                    host,
                    g.constant(m.vertex_tensor()),
                    g.constant(m.texture_tensor()),
                    m.faces(),
                    bounds,
                    Modalities::BOTH,
                    raster,
                )?;
                let img = match compression {
                    Some(q) => dct_compress(&ins.image.tensor(), q)?,
                    None => (*ins.image.tensor()).clone(),
                };
                let pts = ins.points.map(|p| (*p.tensor()).clone());
                detect_boxes(params, &img, pts.as_ref(), &scene.camera, params.config.score_threshold)?
            }
        };
        Ok(EvalRecord::new(scene.id, host.host, scene.vehicles[host.host].bev, scene.ground_truth(), pre, after))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackLogRow {
    pub step: usize,
    pub l_fn: f64,
    pub l_fp: f64,
    pub l_lap: f64,
    pub val_fn_asr: Option<f64>,
    pub val_fp_asr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub mesh: TexturedMesh,
    pub log: Vec<AttackLogRow>,
    pub skipped_steps: usize,
}

/// Optimizes one mesh over minibatches drawn from every host in `train`.
/// `val` holds a validation set with its clean detections. `observe` sees
/// the mesh after every step.
pub fn run_universal_attack(
    train: &AttackSet,
    val: Option<(&AttackSet, &[Vec<DetectionBox>])>,
    params: &DetectorParams,
    cfg: &AttackConfig,
    mut observe: impl FnMut(usize, &TexturedMesh),
) -> Result<AttackRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("attack set has no usable hosts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adv = Adversary::new(initial_mesh(cfg), cfg);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    for step in 1..=cfg.steps {
        let batch: Vec<(&Scene, &HostContext)> = (0..cfg.batch_size).map(|_| train.sample(rng.gen_range(0..train.len()))).collect();
        let r = attack_step(&mut adv, &batch, params, cfg)?;
        skipped += r.skipped as usize;
        observe(step, &adv.mesh);
        let (mut vf, mut vp) = (None, None);
        if let Some((vs, before)) = val {
            if step % cfg.val_every == 0 || step == cfg.steps {
                let rec = evaluate_adversary(vs, params, Some(&adv.mesh), &cfg.bounds, &cfg.raster, None, before)?;
                let rates = attack_success_rates(&rec);
                (vf, vp) = (rates.fn_asr, rates.fp_asr);
            }
        }
        log.push(AttackLogRow { step, l_fn: r.l_fn, l_fp: r.l_fp, l_lap: r.l_lap, val_fn_asr: vf, val_fp_asr: vp });
    }
    Ok(AttackRun { mesh: adv.mesh, log, skipped_steps: skipped })
}

/// CSV with `step,L_fn,L_fp,L_lap,val_fn_asr,val_fp_asr`; empty cells where
/// no validation ran or the rate is undefined.
pub fn write_attack_log(rows: &[AttackLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,L_fn,L_fp,L_lap,val_fn_asr,val_fp_asr\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{},{}", r.step, r.l_fn, r.l_fp, r.l_lap, opt(r.val_fn_asr), opt(r.val_fp_asr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
