//! Command-line interface. Every subcommand writes its outputs plus a
//! manifest into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use super::dataset::split_dir;
use super::experiment::{clean_ap, evaluate_mesh, train_detector, write_train_log};
use super::manifest::{file_sha256, Manifest};
use super::{generate_datasets, insert_adversary, load_dataset, save_dataset, ExperimentConfig, Modalities, Stage};
use crate::attack::{clean_detections, random_mesh, run_universal_attack, write_attack_log, AttackConfig, AttackSet, Modality};
use crate::camera::write_png;
use crate::defense::{dct_compress, free_adv_train, DefenseConfig, DefenseKind};
use crate::detector::{detect_boxes, DetectionBox, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{write_report, write_summary_csv, EvalReport};
use crate::geometry::{read_mesh, transform_mesh, write_mesh, BoxConstraint, TexturedMesh};
use crate::lidar::write_sweep;
use crate::autodiff::Graph;

/// Configuration stored next to a generated dataset.
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const ATTACK_CONFIG_FILE: &str = "attack_config.json";

#[derive(Parser, Debug)]
#[command(name = "advfusion", version, about = "Universal adversarial rooftop meshes against a LiDAR-camera fusion detector")]
pub struct Cli {
    /// Experiment configuration (JSON). Defaults to the configuration stored
    /// with the dataset, then to built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Lidar,
    Image,
    Both,
}

impl Target {
    fn modalities(self) -> Vec<Modality> {
        match self {
            Target::Lidar => vec![Modality::Lidar],
            Target::Image => vec![Modality::Image],
            Target::Both => vec![Modality::Lidar, Modality::Image],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DefenseArg {
    Compression,
    AdvTrain,
    AdvTrainFd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Default,
    /// Fewer LiDAR beams and a longer focal length.
    Transfer,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/eval scenes.
    GenScenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        variant: Variant,
    },
    /// Train the fusion detector on the training split.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Optimize a universal mesh (or draw the random baseline).
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        target: Target,
        /// Cube half-extent L for all three axes.
        #[arg(long)]
        box_size: Option<f64>,
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// ASR, recall and AP of one or more meshes on the evaluation split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        mesh: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Compress camera images before detection.
        #[arg(long)]
        compression: Option<u32>,
    },
    /// Apply a defense and evaluate it.
    Defend {
        #[arg(long, value_enum)]
        kind: DefenseArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mesh attacking the undefended detector (required for compression).
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        quality: Option<u32>,
        #[arg(long)]
        model_steps: Option<usize>,
        /// Steps of the fresh attack against the hardened detector.
        #[arg(long)]
        attack_steps: Option<usize>,
    },
    /// Evaluate a mesh optimized on one dataset against another.
    Transfer {
        #[arg(long)]
        mesh: PathBuf,
        /// Target dataset.
        #[arg(long)]
        data: PathBuf,
        /// Detector trained on the target dataset.
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write images, point clouds and meshes of one scene with and without
    /// the adversary.
    ExportDebug {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        host: usize,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Hardened checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseMetadata {
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub seed: u64,
    pub base_checkpoint_sha256: String,
    pub model_losses: Vec<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `--config`, else the dataset's stored configuration, else defaults; the
/// seed environment variable applies last.
fn resolve_config(explicit: Option<&Path>, data: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match (explicit, data.map(|d| d.join(EXPERIMENT_FILE))) {
        (Some(p), _) => read_json(p)?,
        (None, Some(p)) if p.exists() => read_json(&p)?,
        _ => ExperimentConfig::default(),
    };
    let cfg = cfg.with_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn mesh_attack_config(mesh: &Path, fallback: &AttackConfig) -> Result<AttackConfig> {
    let side = mesh.with_file_name(ATTACK_CONFIG_FILE);
    if side.exists() {
        read_json(&side)
    } else {
        Ok(fallback.clone())
    }
}

fn mesh_label(mesh: &Path) -> String {
    mesh.parent()
        .and_then(|p| p.file_name())
        .or_else(|| mesh.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mesh".to_string())
}

fn write_reports(report: &EvalReport, out: &Path, manifest: &mut Manifest) -> Result<()> {
    report.verify()?;
    write_report(report, &out.join("report.json"))?;
    write_summary_csv(&report.rows, &out.join("summary.csv"))?;
    manifest.add_output(out, "report.json")?;
    manifest.add_output(out, "summary.csv")
}

fn ap_pair(params: &DetectorParams, scenes: &[super::Scene], compression: Option<u32>) -> Result<(f64, f64)> {
    let ap = clean_ap(params, scenes, &[0.5, 0.7], compression)?;
    Ok((ap[0], ap[1]))
}

/// Rows for a list of meshes (with their attack configs) on one set.
fn evaluate_rows(
    cfg: &ExperimentConfig,
    set: &AttackSet,
    params: &DetectorParams,
    meshes: &[(String, TexturedMesh, AttackConfig)],
    compression: Option<u32>,
    report: &mut EvalReport,
) -> Result<()> {
    for (label, mesh, acfg) in meshes {
        let (row, records) = evaluate_mesh(label, set, params, Some(mesh), acfg, compression, &cfg.eval.recall_iou)?;
        report.rows.push(row);
        report.records.push((label.clone(), records));
    }
    Ok(())
}

fn attack_config(cfg: &ExperimentConfig, target: Target, box_size: Option<f64>, steps: Option<usize>) -> Result<AttackConfig> {
    let mut a = cfg.attack.clone();
    a.target_modalities = target.modalities();
    if let Some(l) = box_size {
        a.bounds = BoxConstraint::cube(l)?;
    }
    if let Some(s) = steps {
        a.steps = s;
    }
    a.seed = cfg.stage_seed(Stage::Attack);
    a.validate()?;
    Ok(a)
}

fn optimize(data: &Path, params: &DetectorParams, acfg: &AttackConfig) -> Result<crate::attack::AttackRun> {
    let train = AttackSet::new(load_dataset(&split_dir(data, "train"))?)?;
    let val = AttackSet::new(load_dataset(&split_dir(data, "val"))?)?;
    let before = clean_detections(&val.scenes, params, None)?;
    let val = (!val.is_empty()).then_some((&val, before.as_slice()));
    run_universal_attack(&train, val, params, acfg, |step, _| {
        if step % 25 == 0 {
            log::info!("attack step {step}/{}", acfg.steps);
        }
    })
}

fn gen_scenes(cli_cfg: Option<&Path>, out: &Path, variant: Variant, args: Vec<String>) -> Result<()> {
    let mut cfg = resolve_config(cli_cfg, None)?;
    if variant == Variant::Transfer {
        cfg = cfg.transfer_variant();
    }
    create(out)?;
    let d = generate_datasets(&cfg)?;
    let mut m = Manifest::new("gen-scenes", args, &cfg);
    for (name, scenes) in [("train", &d.train), ("val", &d.val), ("eval", &d.eval)] {
        save_dataset(scenes, &split_dir(out, name))?;
        m.add_output(out, &format!("{name}/index.json"))?;
    }
    write_json(&cfg, &out.join(EXPERIMENT_FILE))?;
    m.add_output(out, EXPERIMENT_FILE)?;
    m.write(out)
}

fn train(cli_cfg: Option<&Path>, data: &Path, out: &Path, steps: Option<usize>, args: Vec<String>) -> Result<()> {
    let mut cfg = resolve_config(cli_cfg, Some(data))?;
    if let Some(s) = steps {
        cfg.training.steps = s;
    }
    create(out)?;
    let scenes = load_dataset(&split_dir(data, "train"))?;
    let (params, log) = train_detector(&cfg, &scenes, |r| log::info!("step {} loss {:.4}", r.step, r.loss))?;
    params.save(&out.join("detector.advf"))?;
    write_train_log(&log, &out.join("train_log.csv"))?;
    let mut m = Manifest::new("train-detector", args, &cfg);
    m.add_output(out, "detector.advf")?;
    m.add_output(out, "train_log.csv")?;
    m.write(out)
}

#[allow(clippy::too_many_arguments)]
fn attack(
    cli_cfg: Option<&Path>,
    data: &Path,
    detector: &Path,
    out: &Path,
    target: Target,
    box_size: Option<f64>,
    random_baseline: bool,
    steps: Option<usize>,
    args: Vec<String>,
) -> Result<()> {
    let cfg = resolve_config(cli_cfg, Some(data))?;
    let params = DetectorParams::load(detector)?;
    let acfg = attack_config(&cfg, target, box_size, steps)?;
    create(out)?;
    let mut m = Manifest::new("attack", args, &cfg);
    let mesh = if random_baseline {
        random_mesh(&acfg, cfg.stage_seed(Stage::Baseline))
    } else {
        let run = optimize(data, &params, &acfg)?;
        if run.skipped_steps > 0 {
            log::warn!("{} attack steps skipped on non-finite loss", run.skipped_steps);
        }
        write_attack_log(&run.log, &out.join("attack_log.csv"))?;
        m.add_output(out, "attack_log.csv")?;
        run.mesh
    };
    write_mesh(&mesh, &out.join("mesh.obj"))?;
    write_json(&acfg, &out.join(ATTACK_CONFIG_FILE))?;
    for f in ["mesh.obj", "mesh.texture.json", ATTACK_CONFIG_FILE] {
        m.add_output(out, f)?;
    }
    m.write(out)
}

fn load_meshes(paths: &[PathBuf], fallback: &AttackConfig) -> Result<Vec<(String, TexturedMesh, AttackConfig)>> {
    paths.iter().map(|p| Ok((mesh_label(p), read_mesh(p)?, mesh_attack_config(p, fallback)?))).collect()
}

fn evaluate(cli_cfg: Option<&Path>, data: &Path, detector: &Path, meshes: &[PathBuf], out: &Path, compression: Option<u32>, args: Vec<String>) -> Result<()> {
    let cfg = resolve_config(cli_cfg, Some(data))?;
    let params = DetectorParams::load(detector)?;
    create(out)?;
    let set = AttackSet::new(load_dataset(&split_dir(data, "eval"))?)?;
    let mut report = EvalReport { rows: Vec::new(), records: Vec::new() };
    let (mut clean, records) = evaluate_mesh("clean", &set, &params, None, &cfg.attack, compression, &cfg.eval.recall_iou)?;
    clean.ap = Some(ap_pair(&params, &set.scenes, compression)?);
    report.rows.push(clean);
    report.records.push(("clean".into(), records));
    evaluate_rows(&cfg, &set, &params, &load_meshes(meshes, &cfg.attack)?, compression, &mut report)?;
    let mut m = Manifest::new("evaluate", args, &cfg);
    write_reports(&report, out, &mut m)?;
    m.write(out)
}

#[allow(clippy::too_many_arguments)]
fn defend(
    cli_cfg: Option<&Path>,
    kind: DefenseArg,
    data: &Path,
    detector: &Path,
    out: &Path,
    mesh: Option<&Path>,
    quality: Option<u32>,
    model_steps: Option<usize>,
    attack_steps: Option<usize>,
    args: Vec<String>,
) -> Result<()> {
    let mut cfg = resolve_config(cli_cfg, Some(data))?;
    cfg.defense.kind = match kind {
        DefenseArg::Compression => DefenseKind::Compression,
        DefenseArg::AdvTrain => DefenseKind::AdvTrain,
        DefenseArg::AdvTrainFd => DefenseKind::AdvTrainFd,
    };
    if let Some(q) = quality {
        cfg.defense.compression_quality = q;
    }
    if let Some(s) = model_steps {
        cfg.defense.model_steps = s;
    }
    cfg.validate()?;
    let base = DetectorParams::load(detector)?;
    create(out)?;
    let set = AttackSet::new(load_dataset(&split_dir(data, "eval"))?)?;
    let mut report = EvalReport { rows: Vec::new(), records: Vec::new() };
    let mut m = Manifest::new("defend", args, &cfg);
    let given = match mesh {
        Some(p) => load_meshes(&[p.to_path_buf()], &cfg.attack)?,
        None => Vec::new(),
    };
    let push_clean = |label: &str, params: &DetectorParams, q: Option<u32>, report: &mut EvalReport| -> Result<()> {
        let (mut row, rec) = evaluate_mesh(label, &set, params, None, &cfg.attack, q, &cfg.eval.recall_iou)?;
        row.ap = Some(ap_pair(params, &set.scenes, q)?);
        report.rows.push(row);
        report.records.push((label.to_string(), rec));
        Ok(())
    };
    push_clean("clean", &base, None, &mut report)?;
    let relabel = |meshes: &[(String, TexturedMesh, AttackConfig)], prefix: &str| -> Vec<(String, TexturedMesh, AttackConfig)> {
        meshes.iter().map(|(l, mesh, a)| (format!("{prefix}_{l}"), mesh.clone(), a.clone())).collect()
    };
    evaluate_rows(&cfg, &set, &base, &relabel(&given, "undefended"), None, &mut report)?;
    match cfg.defense.kind {
        DefenseKind::Compression => {
            if given.is_empty() {
                return Err(Error::invalid("the compression defense needs --mesh"));
            }
            let q = cfg.defense.compression_quality;
            push_clean(&format!("clean_jpeg{q}"), &base, Some(q), &mut report)?;
            evaluate_rows(&cfg, &set, &base, &relabel(&given, &format!("jpeg{q}")), Some(q), &mut report)?;
        }
        DefenseKind::AdvTrain | DefenseKind::AdvTrainFd => {
            let train = AttackSet::new(load_dataset(&split_dir(data, "train"))?)?;
            let seed = cfg.stage_seed(Stage::Defense);
            let run = free_adv_train(&train, &base, &cfg.attack, &cfg.defense, seed)?;
            run.params.save(&out.join("detector.advf"))?;
            let meta = DefenseMetadata {
                defense: cfg.defense.clone(),
                attack: cfg.attack.clone(),
                seed,
                base_checkpoint_sha256: file_sha256(detector)?,
                model_losses: run.model_losses.clone(),
            };
            write_json(&meta, &out.join("detector.defense.json"))?;
            m.add_output(out, "detector.advf")?;
            m.add_output(out, "detector.defense.json")?;
            let label = match cfg.defense.kind {
                DefenseKind::AdvTrainFd => "adv_train_fd",
                _ => "adv_train",
            };
            push_clean(&format!("clean_{label}"), &run.params, None, &mut report)?;
            // fresh attack against the hardened model
            let acfg = attack_config(&cfg, Target::Both, None, attack_steps)?;
            let fresh = optimize(data, &run.params, &acfg)?;
            write_mesh(&fresh.mesh, &out.join("mesh.obj"))?;
            write_json(&acfg, &out.join(ATTACK_CONFIG_FILE))?;
            for f in ["mesh.obj", "mesh.texture.json", ATTACK_CONFIG_FILE] {
                m.add_output(out, f)?;
            }
            evaluate_rows(&cfg, &set, &run.params, &[(format!("{label}_fresh_attack"), fresh.mesh, acfg)], None, &mut report)?;
        }
    }
    write_reports(&report, out, &mut m)?;
    m.write(out)
}

fn transfer(cli_cfg: Option<&Path>, mesh: &Path, data: &Path, detector: &Path, out: &Path, args: Vec<String>) -> Result<()> {
    let cfg = resolve_config(cli_cfg, Some(data))?;
    let params = DetectorParams::load(detector)?;
    create(out)?;
    let set = AttackSet::new(load_dataset(&split_dir(data, "eval"))?)?;
    let mut report = EvalReport { rows: Vec::new(), records: Vec::new() };
    let (mut clean, rec) = evaluate_mesh("clean", &set, &params, None, &cfg.attack, None, &cfg.eval.recall_iou)?;
    clean.ap = Some(ap_pair(&params, &set.scenes, None)?);
    report.rows.push(clean);
    report.records.push(("clean".into(), rec));
    let meshes: Vec<_> = load_meshes(&[mesh.to_path_buf()], &cfg.attack)?
        .into_iter()
        .map(|(l, mesh, a)| (format!("transfer_{l}"), mesh, a))
        .collect();
    evaluate_rows(&cfg, &set, &params, &meshes, None, &mut report)?;
    let mut m = Manifest::new("transfer", args, &cfg);
    write_reports(&report, out, &mut m)?;
    m.write(out)
}

#[allow(clippy::too_many_arguments)]
fn export_debug(
    cli_cfg: Option<&Path>,
    data: &Path,
    scene_id: usize,
    host: usize,
    mesh: Option<&Path>,
    detector: Option<&Path>,
    out: &Path,
    args: Vec<String>,
) -> Result<()> {
    let cfg = resolve_config(cli_cfg, Some(data))?;
    let scene = ["eval", "val", "train"]
        .iter()
        .filter_map(|s| load_dataset(&split_dir(data, s)).ok())
        .flatten()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| Error::invalid(format!("no scene {scene_id} in {}", data.display())))?;
    create(out)?;
    let mut m = Manifest::new("export-debug", args, &cfg);
    write_png(&scene.image, &out.join("clean.png"))?;
    write_sweep(&scene.sweep, &scene.lidar, &out.join("clean.ply"))?;
    let mut files = vec!["clean.png", "clean.ply", "clean.rays.json"];
    let params = detector.map(DetectorParams::load).transpose()?;
    let mut detections: Vec<(String, Vec<DetectionBox>)> = Vec::new();
    if let Some(p) = &params {
        let th = p.config.score_threshold;
        detections.push(("clean".into(), detect_boxes(p, &scene.image, scene.points().as_ref(), &scene.camera, th)?));
    }
    if let Some(path) = mesh {
        let acfg = mesh_attack_config(path, &cfg.attack)?;
        let adv = read_mesh(path)?;
        let ctx = super::HostContext::new(&scene, host)?
            .ok_or_else(|| Error::invalid(format!("vehicle {host} of scene {scene_id} cannot host an adversary")))?;
        let g = Graph::new();
        let ins = insert_adversary(
            &scene,
            &ctx,
            g.constant(adv.vertex_tensor()),
            g.constant(adv.texture_tensor()),
            adv.faces(),
            &acfg.bounds,
            Modalities::BOTH,
            &acfg.raster,
        )?;
        let image = (*ins.image.tensor()).clone();
        write_png(&image, &out.join("adversarial.png"))?;
        write_png(&dct_compress(&image, cfg.defense.compression_quality)?, &out.join("adversarial_jpeg.png"))?;
        write_sweep(&ins.sweep, &scene.lidar, &out.join("adversarial.ply"))?;
        write_mesh(&transform_mesh(&adv, &ctx.adversary_pose(&acfg.bounds)), &out.join("adversary_world.obj"))?;
        files.extend(["adversarial.png", "adversarial_jpeg.png", "adversarial.ply", "adversarial.rays.json", "adversary_world.obj", "adversary_world.texture.json"]);
        if let Some(p) = &params {
            let pts = ins.points.map(|v| (*v.tensor()).clone());
            detections.push(("adversarial".into(), detect_boxes(p, &image, pts.as_ref(), &scene.camera, p.config.score_threshold)?));
        }
    }
    if params.is_some() {
        write_json(&detections, &out.join("detections.json"))?;
        files.push("detections.json");
    }
    for f in files {
        m.add_output(out, f)?;
    }
    m.write(out)
}

/// Runs the CLI on `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    let c = cli.config.as_deref();
    match cli.command {
        Command::GenScenes { out, variant } => gen_scenes(c, &out, variant, args),
        Command::TrainDetector { data, out, steps } => train(c, &data, &out, steps, args),
        Command::Attack { data, detector, out, target, box_size, random_baseline, steps } => {
            attack(c, &data, &detector, &out, target, box_size, random_baseline, steps, args)
        }
        Command::Evaluate { data, detector, mesh, out, compression } => evaluate(c, &data, &detector, &mesh, &out, compression, args),
        Command::Defend { kind, data, detector, out, mesh, quality, model_steps, attack_steps } => {
            defend(c, kind, &data, &detector, &out, mesh.as_deref(), quality, model_steps, attack_steps, args)
        }
        Command::Transfer { mesh, data, detector, out } => transfer(c, &mesh, &data, &detector, &out, args),
        Command::ExportDebug { data, scene, host, mesh, detector, out } => {
            export_debug(c, &data, scene, host, mesh.as_deref(), detector.as_deref(), &out, args)
        }
    }
}
