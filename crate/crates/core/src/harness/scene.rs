//! Synthetic street scenes: ground, a backdrop wall, box-shaped vehicles and
//! vehicle-sized obstacles, rendered into a LiDAR sweep, an 8-bit camera
//! image and a millimeter depth map, plus the per-host context and
//! differentiable adversary insertion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::camera::{composite_image, densify_depth, rasterize_hard, rasterize_soft, CameraModel, DirectionalLight, SoftRasterConfig, DEPTH_FAR};
use crate::detector::{DetectionBox, SampleInputs};
use crate::error::{Error, Result};
use crate::eval::intersection_area;
use crate::geometry::{box_geometry, transform_mesh, transform_vertices, BoxConstraint, Pose, TexturedMesh, Vec3};
use crate::lidar::{merge_sweeps_value, simulate_lidar, simulate_lidar_value, LidarSpec, LidarSweep};
use crate::par;
use crate::rooftop::{fit_vehicle_box, rooftop_pose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Inclusive vehicle count range.
    pub vehicles: [usize; 2],
    /// Inclusive obstacle count range.
    pub obstacles: [usize; 2],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Vehicle centers stay within this bearing from the sensors (radians).
    pub max_bearing: f64,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Clear gap kept between vehicle footprints (meters).
    pub spacing: f64,
    pub backdrop_x: f64,
    pub lidar: LidarSpec,
    pub camera_position: Vec3,
    /// `[fx, fy, cx, cy]`
    pub intrinsics: [f64; 4],
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub light: DirectionalLight,
    pub sky: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        let beams = 32;
        let (lo, hi) = (-15f64.to_radians(), 3f64.to_radians());
        SceneConfig {
            vehicles: [1, 4],
            obstacles: [0, 3],
            x_range: [6.0, 28.0],
            y_range: [-9.0, 9.0],
            max_bearing: 0.65,
            length: [3.8, 4.8],
            width: [1.6, 2.0],
            height: [1.4, 1.7],
            spacing: 0.6,
            backdrop_x: 45.0,
            lidar: LidarSpec {
                beam_elevations: (0..beams).map(|i| lo + (hi - lo) * i as f64 / (beams - 1) as f64).collect(),
                azimuth_step: 0.25f64.to_radians(),
                azimuth_range: [-50f64.to_radians(), 50f64.to_radians()],
                origin: [0.0, 0.0, 1.8],
                max_range: 80.0,
            },
            camera_position: [0.0, 0.0, 1.65],
            intrinsics: [96.0, 96.0, 96.0, 32.0],
            image_size: [64, 192],
            light: DirectionalLight { direction: [0.267, 0.535, -0.802], diffuse: 0.6, ambient: 0.4 },
            sky: [0.72, 0.8, 0.93],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        DirectionalLight::new(self.light.direction, self.light.diffuse, self.light.ambient)?;
        self.camera()?;
        let ranges = [self.x_range, self.y_range, self.length, self.width, self.height];
        if ranges.iter().any(|r| !(r[0] <= r[1])) || self.vehicles[0] > self.vehicles[1] || self.obstacles[0] > self.obstacles[1] {
            return Err(Error::invalid("scene ranges must be ordered"));
        }
        if !(self.x_range[0] > 0.0 && self.backdrop_x > self.x_range[1] + self.length[1]) {
            return Err(Error::invalid("vehicles must lie ahead of the sensors and before the backdrop"));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::forward_facing(self.camera_position, self.intrinsics, self.image_size[0], self.image_size[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// BEV ground truth (score 1).
    pub bev: DetectionBox,
    pub height: f64,
    pub color: [f64; 3],
}

impl Vehicle {
    /// World-frame box mesh: roof darker, front lighter, rear reddish.
    pub fn mesh(&self) -> TexturedMesh {
        let (v, f) = box_geometry(self.bev.length, self.bev.width, self.height);
        let c = self.color;
        let mix = |a: [f64; 3], t: f64| [0, 1, 2].map(|i| c[i] * (1.0 - t) + a[i] * t);
        let faces = [mix([0.0; 3], 0.35), mix([0.0; 3], 0.2), mix([0.9, 0.9, 0.85], 0.5), mix([0.7, 0.05, 0.05], 0.5), c, c];
        // face pairs: bottom, top, front, rear, left, right
        let tex: Vec<f64> = faces.iter().flat_map(|col| col.iter().chain(col.iter()).copied()).collect();
        let mesh = TexturedMesh::new(v, f, 1, tex).expect("box mesh is well formed");
        transform_mesh(&mesh, &Pose::new([self.bev.x, self.bev.y, 0.0], self.bev.heading))
    }

    /// Whether `p` lies inside the body grown by `margin`.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let grown = DetectionBox { length: self.bev.length + 2.0 * margin, width: self.bev.width + 2.0 * margin, ..self.bev };
        p[2] >= -margin && p[2] <= self.height + margin && grown.contains([p[0], p[1]])
    }
}

/// Vehicle-sized clutter (hedges, containers) in one green-dominant color
/// on every face. Not part of the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Footprint (score 0).
    pub bev: DetectionBox,
    pub height: f64,
    pub color: [f64; 3],
}

impl Obstacle {
    pub fn mesh(&self) -> TexturedMesh {
        let (v, f) = box_geometry(self.bev.length, self.bev.width, self.height);
        let tex: Vec<f64> = (0..f.len()).flat_map(|_| self.color).collect();
        let mesh = TexturedMesh::new(v, f, 1, tex).expect("box mesh is well formed");
        transform_mesh(&mesh, &Pose::new([self.bev.x, self.bev.y, 0.0], self.bev.heading))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub vehicles: Vec<Vehicle>,
    pub obstacles: Vec<Obstacle>,
    pub lidar: LidarSpec,
    pub camera: CameraModel,
    pub light: DirectionalLight,
    /// `[3, H, W]`, 8-bit levels.
    pub image: Tensor,
    /// Densified depth, millimeter levels.
    pub depth: Vec<f64>,
    pub sweep: LidarSweep,
}

fn ground_mesh(color: [f64; 3]) -> TexturedMesh {
    let v = vec![[1.0, -70.0, 0.0], [90.0, -70.0, 0.0], [90.0, 70.0, 0.0], [1.0, 70.0, 0.0]];
    TexturedMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], 1, [color, color].concat()).expect("ground")
}

fn backdrop_mesh(x: f64, color: [f64; 3]) -> TexturedMesh {
    // facing the sensors
    let v = vec![[x, -70.0, 0.0], [x, 70.0, 0.0], [x, 70.0, 15.0], [x, -70.0, 15.0]];
    TexturedMesh::new(v, vec![[0, 2, 1], [0, 3, 2]], 1, [color, color].concat()).expect("backdrop")
}

fn merged(meshes: &[TexturedMesh]) -> TexturedMesh {
    let mut v = Vec::new();
    let mut f = Vec::new();
    let mut t = Vec::new();
    for m in meshes {
        let off = v.len();
        v.extend_from_slice(m.vertices());
        f.extend(m.faces().iter().map(|x| x.map(|i| i + off)));
        t.extend_from_slice(m.textures());
    }
    TexturedMesh::new(v, f, 1, t).expect("merged meshes share texture resolution")
}

fn quantize(v: f64, levels: f64) -> f64 {
    (v * levels).round() / levels
}

/// Deterministic sub-seed for scene `index`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Vehicle body colors never have green above both red and blue; obstacle
/// colors always do, so appearance separates the two.
fn vehicle_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (r, b) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
    [r, rng.gen_range(0.1..f64::max(r, b)), b]
}

fn obstacle_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let g = rng.gen_range(0.45..0.8);
    [rng.gen_range(0.05..g - 0.25), g, rng.gen_range(0.05..g - 0.25)]
}

/// Footprints with vehicle-like dimensions; `None` when one does not fit.
fn place_boxes(cfg: &SceneConfig, n: usize, taken: &mut Vec<DetectionBox>, rng: &mut ChaCha8Rng) -> Option<Vec<(DetectionBox, f64)>> {
    let u = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let x = u(rng, cfg.x_range);
            let y = u(rng, cfg.y_range);
            if y.atan2(x).abs() > cfg.max_bearing {
                continue;
            }
            let heading = if rng.gen_bool(0.8) {
                u(rng, [-0.35, 0.35]) + if rng.gen_bool(0.5) { std::f64::consts::PI } else { 0.0 }
            } else {
                u(rng, [-std::f64::consts::PI, std::f64::consts::PI])
            };
            let bev = DetectionBox::new(x, y, u(rng, cfg.length), u(rng, cfg.width), crate::geometry::normalize_angle(heading), 1.0);
            let grown = DetectionBox { length: bev.length + cfg.spacing, width: bev.width + cfg.spacing, ..bev };
            if taken.iter().any(|o| intersection_area(&grown, o) > 0.0) {
                continue;
            }
            taken.push(bev);
            out.push((bev, u(rng, cfg.height)));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<(Vec<Vehicle>, Vec<Obstacle>)> {
    let nv = rng.gen_range(cfg.vehicles[0]..=cfg.vehicles[1]);
    let no = rng.gen_range(cfg.obstacles[0]..=cfg.obstacles[1]);
    let mut taken = Vec::new();
    let mut vehicles = Vec::with_capacity(nv);
    for (bev, height) in place_boxes(cfg, nv, &mut taken, rng)? {
        vehicles.push(Vehicle { bev, height, color: vehicle_color(rng) });
    }
    let mut obstacles = Vec::with_capacity(no);
    for (bev, height) in place_boxes(cfg, no, &mut taken, rng)? {
        obstacles.push(Obstacle { bev: DetectionBox { score: 0.0, ..bev }, height, color: obstacle_color(rng) });
    }
    Some((vehicles, obstacles))
}

impl Scene {
    /// Renders a scene from explicit vehicles.
    pub fn render(id: usize, seed: u64, cfg: &SceneConfig, vehicles: Vec<Vehicle>, ground: [f64; 3], backdrop: [f64; 3]) -> Result<Scene> {
        Scene::render_with_obstacles(id, seed, cfg, vehicles, Vec::new(), ground, backdrop)
    }

    pub fn render_with_obstacles(
        id: usize,
        seed: u64,
        cfg: &SceneConfig,
        vehicles: Vec<Vehicle>,
        obstacles: Vec<Obstacle>,
        ground: [f64; 3],
        backdrop: [f64; 3],
    ) -> Result<Scene> {
        let camera = cfg.camera()?;
        let mut meshes = vec![ground_mesh(ground), backdrop_mesh(cfg.backdrop_x, backdrop)];
        meshes.extend(vehicles.iter().map(Vehicle::mesh));
        meshes.extend(obstacles.iter().map(Obstacle::mesh));
        let world = merged(&meshes);
        let sweep = simulate_lidar(&world, &cfg.lidar);
        let refs: Vec<&TexturedMesh> = meshes.iter().collect();
        let (img, _) = rasterize_hard(&refs, &camera, &cfg.light, cfg.sky, 0.1);
        let image = img.map(|v| quantize(v.clamp(0.0, 1.0), 255.0));
        let depth = densify_depth(&sweep, &camera, DEPTH_FAR).into_iter().map(|d| quantize(d.min(DEPTH_FAR), 1000.0)).collect();
        Ok(Scene { id, seed, vehicles, obstacles, lidar: cfg.lidar.clone(), camera, light: cfg.light, image, depth, sweep })
    }

    /// Random scene; placement failures move on to the next sub-seed.
    pub fn generate(id: usize, seed: u64, cfg: &SceneConfig) -> Result<Scene> {
        cfg.validate()?;
        for attempt in 0..100u64 {
            let sub = scene_seed(seed, id) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED03);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let Some((vehicles, obstacles)) = place_objects(cfg, &mut rng) else { continue };
            let g = rng.gen_range(0.28..0.42);
            let ground = [g, g, g * 0.95];
            let b = rng.gen_range(0.5..0.7);
            let backdrop = [b, b * 1.02, b * 1.08];
            let scene = Scene::render_with_obstacles(id, sub, cfg, vehicles, obstacles.clone(), ground, backdrop)?;
            // occluded or out-of-view vehicles are not labelled; removing them
            // only uncovers the rest, so one re-render suffices
            let visible: Vec<Vehicle> = scene.vehicles.iter().filter(|v| scene.returns_on(v) >= MIN_HOST_POINTS).cloned().collect();
            if visible.len() < cfg.vehicles[0] {
                continue;
            }
            if visible.len() == scene.vehicles.len() {
                return Ok(scene);
            }
            return Scene::render_with_obstacles(id, sub, cfg, visible, obstacles, ground, backdrop);
        }
        Err(Error::invalid(format!("scene {id}: no feasible vehicle placement")))
    }

    /// LiDAR returns on a vehicle's body (ground excluded).
    pub fn returns_on(&self, v: &Vehicle) -> usize {
        self.sweep.points.iter().filter(|p| v.contains(**p, 0.05) && p[2] > 0.05).count()
    }

    pub fn ground_truth(&self) -> Vec<DetectionBox> {
        self.vehicles.iter().map(|v| v.bev).collect()
    }

    pub fn points(&self) -> Option<Tensor> {
        self.sweep.point_tensor()
    }

    pub fn training_sample(&self) -> SampleInputs {
        SampleInputs { image: self.image.clone(), points: self.points(), camera: self.camera.clone(), targets: self.ground_truth() }
    }
}

pub fn generate_scenes(cfg: &SceneConfig, count: usize, seed: u64, first_id: usize) -> Result<Vec<Scene>> {
    let ids: Vec<usize> = (first_id..first_id + count).collect();
    par::map(&ids, |&i| Scene::generate(i, seed, cfg)).into_iter().collect()
}

/// Minimum LiDAR returns on a vehicle for it to be labelled in generated
/// scenes and to host an adversary.
pub const MIN_HOST_POINTS: usize = 20;

/// Per-host state shared by every insertion into one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct HostContext {
    pub scene: usize,
    pub host: usize,
    /// Rooftop frame from the box fit.
    pub roof: Pose,
    /// Dense depth from the sweep without the host's own returns.
    pub scene_depth: Vec<f64>,
}

impl HostContext {
    /// `None` when the host has too few returns for a box fit.
    pub fn new(scene: &Scene, host: usize) -> Result<Option<HostContext>> {
        let v = scene.vehicles.get(host).ok_or_else(|| Error::invalid(format!("scene {} has no vehicle {host}", scene.id)))?;
        let own: Vec<Vec3> = scene.sweep.points.iter().copied().filter(|p| v.contains(*p, 0.05) && p[2] > 0.05).collect();
        if own.len() < MIN_HOST_POINTS {
            return Ok(None);
        }
        let Ok(fit) = fit_vehicle_box(&own, v.bev.heading) else { return Ok(None) };
        let Ok(roof) = rooftop_pose(&fit) else { return Ok(None) };
        let mut rest = LidarSweep::empty(scene.sweep.ray_count);
        for (p, r) in scene.sweep.points.iter().zip(&scene.sweep.ray_ids) {
            if !v.contains(*p, 0.15) {
                rest.points.push(*p);
                rest.ray_ids.push(*r);
            }
        }
        let scene_depth = densify_depth(&rest, &scene.camera, DEPTH_FAR);
        Ok(Some(HostContext { scene: scene.id, host, roof, scene_depth }))
    }

    /// Placement of the adversary frame: the constraint box rests on the roof.
    pub fn adversary_pose(&self, bounds: &BoxConstraint) -> Pose {
        let t = self.roof.translation;
        Pose { translation: [t[0], t[1], t[2] + bounds.lz], heading: self.roof.heading }
    }
}

/// Which input branches pass gradients back to the adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub lidar: bool,
    pub image: bool,
}

impl Modalities {
    pub const BOTH: Modalities = Modalities { lidar: true, image: true };
}

/// Perturbed detector inputs.
pub struct Insertion<'g> {
    pub image: Value<'g>,
    pub points: Option<Value<'g>>,
    pub sweep: LidarSweep,
}

/// Renders the adversary (local vertices `[N, 3]`, textures `[M, C, C, 3]`)
/// on the host's roof into both modalities. Branches not in `grad_to` see
/// detached copies, so the forward result never depends on the gating.
#[allow(clippy::too_many_arguments)]
pub fn insert_adversary<'g>(
    scene: &Scene,
    host: &HostContext,
    vertices: Value<'g>,
    textures: Value<'g>,
    faces: &[[usize; 3]],
    bounds: &BoxConstraint,
    grad_to: Modalities,
    raster: &SoftRasterConfig,
) -> Result<Insertion<'g>> {
    let world = transform_vertices(vertices, &host.adversary_pose(bounds))?;
    let (wl, wi, ti) = (
        if grad_to.lidar { world } else { world.detach() },
        if grad_to.image { world } else { world.detach() },
        if grad_to.image { textures } else { textures.detach() },
    );
    let rendered = simulate_lidar_value(wl, faces, &scene.lidar)?;
    let (points, sweep) = merge_sweeps_value(&scene.sweep, &rendered, scene.lidar.origin)?;
    let soft = rasterize_soft(wi, ti, faces, &scene.camera, &scene.light, raster, None)?;
    let image = composite_image(&scene.image, soft.rgba, &soft.depth, &host.scene_depth)?;
    Ok(Insertion { image, points, sweep })
}
