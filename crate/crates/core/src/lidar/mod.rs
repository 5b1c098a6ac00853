//! LiDAR simulation: ray generation from a sensor description, Möller–Trumbore
//! ray/mesh intersection, and occlusion-aware merging of simulated returns
//! into an existing sweep.

mod io;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Value};
use crate::error::{Error, Result};
use crate::geometry::{TexturedMesh, Vec3};
use crate::jet::{cross3, dot3, seed_triangle, sub3, Jet, Real, V3};
use crate::tensor::Tensor;

pub use io::{read_sweep, write_sweep, SweepSidecar};

/// Determinant threshold below which a ray counts as parallel to a face.
pub const GRAZING_DET: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    /// Beam elevation angles (radians), one per laser.
    pub beam_elevations: Vec<f64>,
    pub azimuth_step: f64,
    /// `[start, end)` in radians.
    pub azimuth_range: [f64; 2],
    /// Sensor position, world frame.
    pub origin: Vec3,
    /// Returns beyond this range are dropped.
    pub max_range: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        let span = self.azimuth_range[1] - self.azimuth_range[0];
        if self.beam_elevations.is_empty() {
            return Err(Error::invalid("lidar spec needs at least one beam"));
        }
        if !(self.azimuth_step > 0.0) || !(span > 0.0) {
            return Err(Error::invalid("azimuth step and range must be positive"));
        }
        let n = span / self.azimuth_step;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) || n.round() < 1.0 {
            return Err(Error::invalid(format!(
                "azimuth step {} does not divide range {:?}",
                self.azimuth_step, self.azimuth_range
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::invalid("max range must be positive"));
        }
        Ok(())
    }

    pub fn azimuth_count(&self) -> usize {
        ((self.azimuth_range[1] - self.azimuth_range[0]) / self.azimuth_step).round() as usize
    }

    pub fn ray_count(&self) -> usize {
        self.beam_elevations.len() * self.azimuth_count()
    }

    /// Ray `id = beam * azimuth_count + azimuth_index`.
    pub fn ray(&self, id: usize) -> Ray {
        let na = self.azimuth_count();
        let el = self.beam_elevations[id / na];
        let az = self.azimuth_range[0] + (id % na) as f64 * self.azimuth_step;
        let (se, ce) = el.sin_cos();
        let (sa, ca) = az.sin_cos();
        Ray { origin: self.origin, dir: [ce * ca, ce * sa, se] }
    }

    /// Nearest `(elevation, azimuth)` bucket of a world point.
    pub fn nearest_ray(&self, p: Vec3) -> Option<usize> {
        let d = sub3(p, self.origin);
        let horiz = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if horiz == 0.0 && d[2] == 0.0 {
            return None;
        }
        let el = d[2].atan2(horiz);
        let az = d[1].atan2(d[0]);
        let beam = self
            .beam_elevations
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - el).abs().total_cmp(&(b.1 - el).abs()))?
            .0;
        let na = self.azimuth_count();
        let mut rel = (az - self.azimuth_range[0]).rem_euclid(std::f64::consts::TAU);
        // wrap the far edge back to the first bucket only for full circles
        let span = self.azimuth_range[1] - self.azimuth_range[0];
        let idx = (rel / self.azimuth_step).round();
        if idx >= na as f64 {
            if span >= std::f64::consts::TAU - 1e-9 {
                rel = 0.0;
            } else {
                return None;
            }
        }
        let idx = if rel == 0.0 { 0 } else { idx as usize };
        Some(beam * na + idx)
    }
}

/// One ray per `(beam, azimuth)` pair with unit directions.
pub fn generate_rays(spec: &LidarSpec) -> Vec<Ray> {
    (0..spec.ray_count()).map(|id| spec.ray(id)).collect()
}

/// Möller–Trumbore. Returns `(t, u, v)` with barycentrics `(1-u-v, u, v)`
/// for `(v0, v1, v2)`; grazing (|det| < [`GRAZING_DET`]) and `t <= 0` miss.
pub fn moller_trumbore<R: Real>(origin: Vec3, dir: Vec3, v0: V3<R>, v1: V3<R>, v2: V3<R>) -> Option<(R, R, R)> {
    let o = origin.map(R::cst);
    let d = dir.map(R::cst);
    let e1 = sub3(v1, v0);
    let e2 = sub3(v2, v0);
    let p = cross3(d, e2);
    let det = dot3(e1, p);
    if det.val().abs() < GRAZING_DET {
        return None;
    }
    let inv = R::cst(1.0) / det;
    let s = sub3(o, v0);
    let u = dot3(s, p) * inv;
    if u.val() < 0.0 || u.val() > 1.0 {
        return None;
    }
    let q = cross3(s, e1);
    let v = dot3(d, q) * inv;
    if v.val() < 0.0 || u.val() + v.val() > 1.0 {
        return None;
    }
    let t = dot3(e2, q) * inv;
    (t.val() > 0.0).then_some((t, u, v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub face: usize,
    pub bary: Vec3,
}

fn triangle(mesh: &TexturedMesh, f: usize) -> [Vec3; 3] {
    let [a, b, c] = mesh.faces()[f];
    let v = mesh.vertices();
    [v[a], v[b], v[c]]
}

/// Nearest hit with `t > 0` over all faces.
pub fn intersect_ray_mesh(ray: &Ray, mesh: &TexturedMesh) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for f in 0..mesh.faces().len() {
        let [a, b, c] = triangle(mesh, f);
        if let Some((t, u, v)) = moller_trumbore::<f64>(ray.origin, ray.dir, a, b, c) {
            if best.map_or(true, |h| t < h.t) {
                best = Some(Hit { t, face: f, bary: [1.0 - u - v, u, v] });
            }
        }
    }
    best
}

/// Bounding sphere (center, radius) of a vertex set.
fn bounding_sphere(vertices: &[Vec3]) -> (Vec3, f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for j in 0..3 {
            lo[j] = lo[j].min(v[j]);
            hi[j] = hi[j].max(v[j]);
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let r = vertices.iter().map(|v| dot3(sub3(*v, c), sub3(*v, c)).sqrt()).fold(0.0, f64::max);
    (c, r + 1e-9)
}

/// Ids of rays that can reach the sphere.
fn candidate_rays(spec: &LidarSpec, center: Vec3, radius: f64) -> Vec<usize> {
    (0..spec.ray_count())
        .filter(|&id| {
            let ray = spec.ray(id);
            let oc = sub3(center, ray.origin);
            let along = dot3(oc, ray.dir);
            let perp2 = dot3(oc, oc) - along * along;
            perp2 <= radius * radius && (along > 0.0 || dot3(oc, oc) <= radius * radius)
        })
        .collect()
}

/// Point cloud with one optional return per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarSweep {
    pub points: Vec<Vec3>,
    pub ray_ids: Vec<usize>,
    /// Size of the ray id space the ids index into.
    pub ray_count: usize,
}

impl LidarSweep {
    pub fn new(points: Vec<Vec3>, ray_ids: Vec<usize>, ray_count: usize) -> Result<Self> {
        if points.len() != ray_ids.len() {
            return Err(Error::invalid("points and ray ids differ in length"));
        }
        let mut seen = vec![false; ray_count];
        for &r in &ray_ids {
            if r >= ray_count {
                return Err(Error::invalid(format!("ray id {r} outside {ray_count} rays")));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid(format!("ray id {r} has more than one return")));
            }
        }
        Ok(LidarSweep { points, ray_ids, ray_count })
    }

    pub fn empty(ray_count: usize) -> Self {
        LidarSweep { points: Vec::new(), ray_ids: Vec::new(), ray_count }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_tensor(&self) -> Option<Tensor> {
        (!self.points.is_empty())
            .then(|| Tensor::from_parts(vec![self.points.len(), 3], self.points.iter().flatten().copied().collect()))
    }

    /// Rebuilds ray ids for points that lack them (nearest bucket). When two
    /// points land on one ray, the nearer one is kept.
    pub fn from_points(points: &[Vec3], spec: &LidarSpec) -> Self {
        let mut best: Vec<Option<(f64, usize)>> = vec![None; spec.ray_count()];
        for (i, &p) in points.iter().enumerate() {
            let Some(r) = spec.nearest_ray(p) else { continue };
            let d = dot3(sub3(p, spec.origin), sub3(p, spec.origin));
            if best[r].map_or(true, |(bd, _)| d < bd) {
                best[r] = Some((d, i));
            }
        }
        let mut out = LidarSweep::empty(spec.ray_count());
        for (r, b) in best.iter().enumerate() {
            if let Some((_, i)) = b {
                out.points.push(points[*i]);
                out.ray_ids.push(r);
            }
        }
        out
    }
}

/// Casts every ray against a world-frame mesh.
pub fn simulate_lidar(mesh: &TexturedMesh, spec: &LidarSpec) -> LidarSweep {
    let hits = cast(mesh.vertices(), mesh.faces(), spec);
    let mut sweep = LidarSweep::empty(spec.ray_count());
    for (id, hit) in hits {
        sweep.points.push(spec.ray(id).at(hit.t));
        sweep.ray_ids.push(id);
    }
    sweep
}

fn cast(vertices: &[Vec3], faces: &[[usize; 3]], spec: &LidarSpec) -> Vec<(usize, Hit)> {
    let (c, r) = bounding_sphere(vertices);
    let tris: Vec<[Vec3; 3]> = faces.iter().map(|f| [vertices[f[0]], vertices[f[1]], vertices[f[2]]]).collect();
    let mut out = Vec::new();
    for id in candidate_rays(spec, c, r) {
        let ray = spec.ray(id);
        let mut best: Option<Hit> = None;
        for (fi, [a, b, cc]) in tris.iter().enumerate() {
            if let Some((t, u, v)) = moller_trumbore::<f64>(ray.origin, ray.dir, *a, *b, *cc) {
                if t <= spec.max_range && best.map_or(true, |h| t < h.t) {
                    best = Some(Hit { t, face: fi, bary: [1.0 - u - v, u, v] });
                }
            }
        }
        if let Some(h) = best {
            out.push((id, h));
        }
    }
    out
}

/// Simulated returns whose positions stay differentiable in the vertices.
pub struct RenderedLidar<'g> {
    /// `[K, 3]`, `None` when no ray hits.
    pub points: Option<Value<'g>>,
    pub ray_ids: Vec<usize>,
    pub ray_count: usize,
}

impl RenderedLidar<'_> {
    pub fn to_sweep(&self) -> LidarSweep {
        let points = self
            .points
            .map(|p| p.tensor().data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .unwrap_or_default();
        LidarSweep { points, ray_ids: self.ray_ids.clone(), ray_count: self.ray_count }
    }
}

struct LidarBackward {
    faces: Vec<[usize; 3]>,
    hits: Vec<(Ray, usize)>,
}

impl Backward for LidarBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let v = inputs[0].data();
        let mut gv = vec![0.0; v.len()];
        for (k, (ray, face)) in self.hits.iter().enumerate() {
            let f = self.faces[*face];
            let corner = |i: usize| [v[3 * f[i]], v[3 * f[i] + 1], v[3 * f[i] + 2]];
            let [a, b, c] = seed_triangle([corner(0), corner(1), corner(2)]);
            let g = &grad.data()[3 * k..3 * k + 3];
            let dl_dt = g[0] * ray.dir[0] + g[1] * ray.dir[1] + g[2] * ray.dir[2];
            // the hit set is fixed; re-evaluating at the same vertices always hits
            let Some((t, _, _)) = moller_trumbore::<Jet<9>>(ray.origin, ray.dir, a, b, c) else { continue };
            for (corner_idx, &vi) in f.iter().enumerate() {
                for j in 0..3 {
                    gv[3 * vi + j] += dl_dt * t.d[3 * corner_idx + j];
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gv))]
    }
}

/// Casts rays against world-frame vertices `[N, 3]` with the given faces.
/// Returned points are `origin + t * dir`, differentiable through `t`.
pub fn simulate_lidar_value<'g>(vertices: Value<'g>, faces: &[[usize; 3]], spec: &LidarSpec) -> Result<RenderedLidar<'g>> {
    let vt = vertices.tensor();
    if vt.shape().len() != 2 || vt.shape()[1] != 3 {
        return Err(Error::shape("simulate_lidar", format!("vertices {:?}", vt.shape())));
    }
    let verts: Vec<Vec3> = vt.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let hits = cast(&verts, faces, spec);
    let ray_ids: Vec<usize> = hits.iter().map(|(id, _)| *id).collect();
    if hits.is_empty() {
        return Ok(RenderedLidar { points: None, ray_ids, ray_count: spec.ray_count() });
    }
    let mut data = Vec::with_capacity(3 * hits.len());
    let mut back = Vec::with_capacity(hits.len());
    for (id, h) in &hits {
        let ray = spec.ray(*id);
        data.extend_from_slice(&ray.at(h.t));
        back.push((ray, h.face));
    }
    let out = Tensor::from_parts(vec![hits.len(), 3], data);
    let points = vertices.graph().record(&[vertices], out, LidarBackward { faces: faces.to_vec(), hits: back });
    Ok(RenderedLidar { points: Some(points), ray_ids, ray_count: spec.ray_count() })
}

/// Which input a merged return came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReturnSource {
    Original(usize),
    Rendered(usize),
}

/// Per ray, the nearer of the two returns (ties keep the original). Output
/// is ordered by ray id.
pub fn merge_plan(original: &LidarSweep, rendered: &LidarSweep, origin: Vec3) -> Result<Vec<(usize, ReturnSource)>> {
    if original.ray_count != rendered.ray_count {
        return Err(Error::invalid(format!(
            "ray id spaces differ: {} vs {} rays",
            original.ray_count, rendered.ray_count
        )));
    }
    let dist = |p: Vec3| dot3(sub3(p, origin), sub3(p, origin));
    let mut slot: Vec<Option<(f64, ReturnSource)>> = vec![None; original.ray_count];
    for (i, (&r, &p)) in original.ray_ids.iter().zip(&original.points).enumerate() {
        slot[r] = Some((dist(p), ReturnSource::Original(i)));
    }
    for (k, (&r, &p)) in rendered.ray_ids.iter().zip(&rendered.points).enumerate() {
        let d = dist(p);
        if slot[r].map_or(true, |(od, _)| d < od) {
            slot[r] = Some((d, ReturnSource::Rendered(k)));
        }
    }
    Ok(slot.into_iter().enumerate().filter_map(|(r, s)| s.map(|(_, src)| (r, src))).collect())
}

pub fn merge_sweeps(original: &LidarSweep, rendered: &LidarSweep, origin: Vec3) -> Result<LidarSweep> {
    let plan = merge_plan(original, rendered, origin)?;
    let mut out = LidarSweep::empty(original.ray_count);
    for (r, src) in plan {
        out.points.push(match src {
            ReturnSource::Original(i) => original.points[i],
            ReturnSource::Rendered(k) => rendered.points[k],
        });
        out.ray_ids.push(r);
    }
    Ok(out)
}

/// Differentiable merge: rendered rows keep their gradient path.
pub fn merge_sweeps_value<'g>(
    original: &LidarSweep,
    rendered: &RenderedLidar<'g>,
    origin: Vec3,
) -> Result<(Option<Value<'g>>, LidarSweep)> {
    let rendered_sweep = rendered.to_sweep();
    let plan = merge_plan(original, &rendered_sweep, origin)?;
    let merged = merge_sweeps(original, &rendered_sweep, origin)?;
    let Some(rp) = rendered.points else {
        return Ok((None, merged));
    };
    let g = rp.graph();
    if plan.is_empty() {
        return Ok((None, merged));
    }
    let n_orig = original.len();
    let stacked = match original.point_tensor() {
        Some(t) => Value::concat(&[g.constant(t), rp])?,
        None => rp,
    };
    let idx: Vec<usize> = plan
        .iter()
        .map(|(_, src)| match *src {
            ReturnSource::Original(i) => i,
            ReturnSource::Rendered(k) => n_orig + k,
        })
        .collect();
    Ok((Some(stacked.gather_rows(&idx)?), merged))
}
