//! Probabilistic (soft) rasterization of textured triangle meshes, plus a
//! z-buffer rasterizer for rendering clean scenes.
//!
//! Each face contributes to a pixel through an influence
//! `sigmoid(sign * d^2 / sigma)` where `d` is the distance from the pixel
//! center to the projected triangle in normalized screen units (`2 / W` per
//! pixel). Colors are blended with weights `D_j * exp((zn_j - m) / gamma)`
//! over the nearest faces plus a background term, where `zn` is the
//! normalized inverse depth `(zfar - z) / (zfar - znear)`.

use serde::{Deserialize, Serialize};

use super::{CameraModel, DirectionalLight};
use crate::autodiff::{sigmoid, Backward, Value};
use crate::error::{Error, Result};
use crate::geometry::TexturedMesh;
use crate::jet::{cross3, dot3, seed_triangle, sub3, Jet, Real, V3};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftRasterConfig {
    pub sigma: f64,
    pub gamma: f64,
    /// Used where no background image is supplied.
    pub background: [f64; 3],
    pub znear: f64,
    pub zfar: f64,
    /// Faces aggregated per pixel (nearest first).
    pub max_faces: usize,
    /// Normalized depth of the background term.
    pub eps: f64,
    /// Faces whose outside `d^2 / sigma` exceeds this are skipped.
    pub cull: f64,
}

impl Default for SoftRasterConfig {
    fn default() -> Self {
        SoftRasterConfig {
            sigma: 1e-4,
            gamma: 1e-4,
            background: [0.0; 3],
            znear: 0.1,
            zfar: 100.0,
            max_faces: 16,
            eps: 1e-3,
            cull: 20.0,
        }
    }
}

impl SoftRasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.gamma > 0.0) {
            return Err(Error::invalid("sigma and gamma must be positive"));
        }
        if !(self.znear > 0.0 && self.zfar > self.znear) || self.max_faces == 0 || !(self.cull > 0.0) {
            return Err(Error::invalid("bad clipping range, face cap or cull threshold"));
        }
        Ok(())
    }
}

pub(crate) struct Ctx<'a> {
    cam: &'a CameraModel,
    light: &'a DirectionalLight,
    /// `(2 / W)^2 / sigma`
    k: f64,
    cull: f64,
    znear: f64,
    zfar: f64,
    tex_res: usize,
}

/// One face's contribution to one pixel.
pub(crate) struct Frag<R> {
    pub influence: R,
    pub zn: R,
    pub z: R,
    pub shade: R,
    /// Texel index within the face (`i * C + j`) and bilinear weight.
    pub texels: [(usize, R); 4],
    pub inside: bool,
}

fn cross2<R: Real>(a: [R; 2], b: [R; 2]) -> R {
    a[0] * b[1] - a[1] * b[0]
}

fn seg_dist2<R: Real>(p: [f64; 2], a: [R; 2], b: [R; 2]) -> R {
    let e = [b[0] - a[0], b[1] - a[1]];
    let w = [a[0] * -1.0 + p[0], a[1] * -1.0 + p[1]];
    let ee = e[0] * e[0] + e[1] * e[1];
    let t = (w[0] * e[0] + w[1] * e[1]) / ee;
    let t = if t.val() < 0.0 {
        R::cst(0.0)
    } else if t.val() > 1.0 {
        R::cst(1.0)
    } else {
        t
    };
    let dx = w[0] - e[0] * t;
    let dy = w[1] - e[1] * t;
    dx * dx + dy * dy
}

fn relu<R: Real>(x: R) -> R {
    if x.val() < 0.0 {
        R::cst(0.0)
    } else {
        x
    }
}

pub(crate) fn fragment<R: Real>(tri: [V3<R>; 3], px: [f64; 2], ctx: &Ctx) -> Option<Frag<R>> {
    let pc = tri.map(|v| ctx.cam.to_camera(v));
    if pc.iter().any(|p| p[2].val() <= ctx.znear) {
        return None;
    }
    let uv = pc.map(|p| {
        let (u, v) = ctx.cam.pixel(p);
        [u, v]
    });
    let rel = |q: [R; 2]| [q[0] - px[0], q[1] - px[1]];
    let area = cross2([uv[1][0] - uv[0][0], uv[1][1] - uv[0][1]], [uv[2][0] - uv[0][0], uv[2][1] - uv[0][1]]);
    if area.val().abs() < 1e-12 {
        return None;
    }
    let (a, b, c) = (rel(uv[0]), rel(uv[1]), rel(uv[2]));
    let w0 = cross2(b, c) / area;
    let w1 = cross2(c, a) / area;
    let w2 = R::cst(1.0) - w0 - w1;
    let inside = w0.val() >= 0.0 && w1.val() >= 0.0 && w2.val() >= 0.0;

    let mut d2 = seg_dist2(px, uv[0], uv[1]);
    for (p, q) in [(uv[1], uv[2]), (uv[2], uv[0])] {
        let e = seg_dist2(px, p, q);
        if e.val() < d2.val() {
            d2 = e;
        }
    }
    let x = d2 * if inside { ctx.k } else { -ctx.k };
    if !inside && -x.val() > ctx.cull {
        return None;
    }
    let s = sigmoid(x.val());
    let influence = x.chain(s, s * (1.0 - s));

    let wc = [relu(w0), relu(w1), relu(w2)];
    let sum = wc[0] + wc[1] + wc[2];
    let q = [wc[0] / sum / pc[0][2], wc[1] / sum / pc[1][2], wc[2] / sum / pc[2][2]];
    let qs = q[0] + q[1] + q[2];
    let z = R::cst(1.0) / qs;
    let zn = (R::cst(ctx.zfar) - z) / (ctx.zfar - ctx.znear);

    let cres = ctx.tex_res;
    let texels = if cres == 1 {
        [(0, R::cst(1.0)), (0, R::cst(0.0)), (0, R::cst(0.0)), (0, R::cst(0.0))]
    } else {
        let m = (cres - 1) as f64;
        let ga = q[0] / qs * m;
        let gb = q[1] / qs * m;
        let i0 = (ga.val().floor().max(0.0) as usize).min(cres - 2);
        let j0 = (gb.val().floor().max(0.0) as usize).min(cres - 2);
        let fa = ga - i0 as f64;
        let fb = gb - j0 as f64;
        let one = R::cst(1.0);
        [
            (i0 * cres + j0, (one - fa) * (one - fb)),
            ((i0 + 1) * cres + j0, fa * (one - fb)),
            (i0 * cres + j0 + 1, (one - fa) * fb),
            ((i0 + 1) * cres + j0 + 1, fa * fb),
        ]
    };

    let n = cross3(sub3(tri[1], tri[0]), sub3(tri[2], tri[0]));
    let len = dot3(n, n).sqrt();
    let shade = ctx.light.intensity(n.map(|c| c / len));
    Some(Frag { influence, zn, z, shade, texels, inside })
}

fn texel_color<R: Real>(f: &Frag<R>, tex: &[f64], base: usize) -> [R; 3] {
    let mut c = [R::cst(0.0); 3];
    for &(t, w) in &f.texels {
        for ch in 0..3 {
            c[ch] = c[ch] + w * tex[base + 3 * t + ch];
        }
    }
    c.map(|x| x * f.shade)
}

/// Soft rasterization result.
pub struct SoftRender<'g> {
    /// `[4, H, W]`: rgb then alpha.
    pub rgba: Value<'g>,
    /// Blended face depth per pixel (row-major), `+inf` where no face
    /// contributes. Not differentiated.
    pub depth: Vec<f64>,
}

struct PixelState {
    pixel: usize,
    faces: Vec<usize>,
}

struct SoftBackward {
    faces: Vec<[usize; 3]>,
    cam: CameraModel,
    light: DirectionalLight,
    cfg: SoftRasterConfig,
    tex_res: usize,
    background: Vec<f64>,
    active: Vec<PixelState>,
}

fn ctx<'a>(cam: &'a CameraModel, light: &'a DirectionalLight, cfg: &SoftRasterConfig, tex_res: usize) -> Ctx<'a> {
    let s = 2.0 / cam.width as f64;
    Ctx { cam, light, k: s * s / cfg.sigma, cull: cfg.cull, znear: cfg.znear, zfar: cfg.zfar, tex_res }
}

fn pixel_center(cam: &CameraModel, p: usize) -> [f64; 2] {
    [(p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5]
}

fn corners<R: Real>(v: &[f64], f: [usize; 3], lift: impl Fn([[f64; 3]; 3]) -> [V3<R>; 3]) -> [V3<R>; 3] {
    let c = |i: usize| [v[3 * f[i]], v[3 * f[i] + 1], v[3 * f[i] + 2]];
    lift([c(0), c(1), c(2)])
}

struct Blend {
    rgb: [f64; 3],
    alpha: f64,
    depth: f64,
    z: f64,
    /// `exp((zn_j - m) / gamma)` per face.
    expo: Vec<f64>,
}

fn blend(frags: &[(Frag<f64>, [f64; 3])], bg: [f64; 3], cfg: &SoftRasterConfig) -> Blend {
    let m = frags.iter().map(|(f, _)| f.zn).fold(cfg.eps, f64::max);
    let expo: Vec<f64> = frags.iter().map(|(f, _)| ((f.zn - m) / cfg.gamma).exp()).collect();
    let eb = ((cfg.eps - m) / cfg.gamma).exp();
    let mut z = eb;
    let mut acc = bg.map(|c| c * eb);
    let mut zacc = 0.0;
    let mut wsum = 0.0;
    let mut keep = 1.0;
    for ((f, c), e) in frags.iter().zip(&expo) {
        let w = f.influence * e;
        z += w;
        wsum += w;
        zacc += w * f.z;
        for ch in 0..3 {
            acc[ch] += w * c[ch];
        }
        keep *= 1.0 - f.influence;
    }
    let depth = if wsum > 0.0 { zacc / wsum } else { f64::INFINITY };
    Blend { rgb: acc.map(|a| a / z), alpha: 1.0 - keep, depth, z, expo }
}

impl Backward for SoftBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let v = inputs[0].data();
        let tex = inputs[1].data();
        let ctx = ctx(&self.cam, &self.light, &self.cfg, self.tex_res);
        let hw = self.cam.pixel_count();
        let face_tex = self.tex_res * self.tex_res * 3;
        let chunk = 64;
        let partials = par::map_range(self.active.len().div_ceil(chunk), |ci| {
            let mut gv = vec![0.0; v.len()];
            let mut gt = vec![0.0; tex.len()];
            for st in &self.active[ci * chunk..((ci + 1) * chunk).min(self.active.len())] {
                let p = st.pixel;
                let g = [grad.data()[p], grad.data()[hw + p], grad.data()[2 * hw + p]];
                let ga = grad.data()[3 * hw + p];
                let px = pixel_center(&self.cam, p);
                let bg = [self.background[p], self.background[hw + p], self.background[2 * hw + p]];
                let jets: Vec<(Frag<Jet<9>>, [Jet<9>; 3])> = st
                    .faces
                    .iter()
                    .map(|&fi| {
                        let tri = corners(v, self.faces[fi], seed_triangle);
                        let fr = fragment(tri, px, &ctx).expect("fragment kept in forward pass");
                        let c = texel_color(&fr, tex, fi * face_tex);
                        (fr, c)
                    })
                    .collect();
                let vals: Vec<(Frag<f64>, [f64; 3])> = jets
                    .iter()
                    .map(|(f, c)| {
                        let fv = Frag {
                            influence: f.influence.v,
                            zn: f.zn.v,
                            z: f.z.v,
                            shade: f.shade.v,
                            texels: f.texels.map(|(i, w)| (i, w.v)),
                            inside: f.inside,
                        };
                        (fv, c.map(|x| x.v))
                    })
                    .collect();
                let b = blend(&vals, bg, &self.cfg);
                for (j, ((fj, cj), (fv, cv))) in jets.iter().zip(&vals).enumerate() {
                    let s: f64 = (0..3).map(|ch| g[ch] * (cv[ch] - b.rgb[ch])).sum::<f64>() / b.z;
                    let others: f64 = vals
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| *k != j)
                        .map(|(_, (f, _))| 1.0 - f.influence)
                        .product();
                    let e = fv.influence * b.expo[j];
                    let g_d = s * b.expo[j] + ga * others;
                    let g_zn = s * e / self.cfg.gamma;
                    let g_c = g.map(|x| x * e / b.z);
                    let f = self.faces[st.faces[j]];
                    for (ci, &vi) in f.iter().enumerate() {
                        for k in 0..3 {
                            let t = 3 * ci + k;
                            let mut acc = g_d * fj.influence.d[t] + g_zn * fj.zn.d[t];
                            for ch in 0..3 {
                                acc += g_c[ch] * cj[ch].d[t];
                            }
                            gv[3 * vi + k] += acc;
                        }
                    }
                    let base = st.faces[j] * face_tex;
                    for &(ti, w) in &fv.texels {
                        for ch in 0..3 {
                            gt[base + 3 * ti + ch] += g_c[ch] * fv.shade * w;
                        }
                    }
                }
            }
            (gv, gt)
        });
        let mut gv = vec![0.0; v.len()];
        let mut gt = vec![0.0; tex.len()];
        for (a, b) in partials {
            gv.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            gt.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gv)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gt)),
        ]
    }
}

/// Projected bounding box `(u0, v0, u1, v1)` of a face in pixels, or `None`
/// if a corner is behind the near plane.
fn face_bbox(cam: &CameraModel, tri: [[f64; 3]; 3], znear: f64) -> Option<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in tri {
        let pc = cam.to_camera(p);
        if pc[2] <= znear {
            return None;
        }
        let (u, v) = cam.pixel(pc);
        b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
    }
    Some(b)
}

/// Candidate faces per pixel: faces whose projected box, grown by `margin`
/// pixels, covers the pixel center.
fn bin_faces(cam: &CameraModel, v: &[f64], faces: &[[usize; 3]], znear: f64, margin: f64) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); cam.pixel_count()];
    for (fi, &f) in faces.iter().enumerate() {
        let tri = corners(v, f, |c| c);
        let Some(b) = face_bbox(cam, tri, znear) else { continue };
        let c0 = ((b[0] - margin - 0.5).ceil().max(0.0)) as usize;
        let r0 = ((b[1] - margin - 0.5).ceil().max(0.0)) as usize;
        let c1 = (b[2] + margin - 0.5).floor();
        let r1 = (b[3] + margin - 0.5).floor();
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let c1 = (c1 as usize).min(cam.width - 1);
        let r1 = (r1 as usize).min(cam.height - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                bins[r * cam.width + c].push(fi);
            }
        }
    }
    bins
}

/// Soft-rasterizes world-frame vertices `[N, 3]` with per-face textures
/// `[M, C, C, 3]`. `background` (`[3, H, W]`) defaults to the configured
/// constant color.
#[allow(clippy::too_many_arguments)]
pub fn rasterize_soft<'g>(
    vertices: Value<'g>,
    textures: Value<'g>,
    faces: &[[usize; 3]],
    cam: &CameraModel,
    light: &DirectionalLight,
    cfg: &SoftRasterConfig,
    background: Option<&Tensor>,
) -> Result<SoftRender<'g>> {
    cfg.validate()?;
    let vt = vertices.tensor();
    let tt = textures.tensor();
    let ts = tt.shape();
    if vt.shape().len() != 2 || vt.shape()[1] != 3 {
        return Err(Error::shape("rasterize_soft", format!("vertices {:?}", vt.shape())));
    }
    if ts.len() != 4 || ts[0] != faces.len() || ts[1] != ts[2] || ts[3] != 3 {
        return Err(Error::shape("rasterize_soft", format!("textures {ts:?} for {} faces", faces.len())));
    }
    let (h, w) = (cam.height, cam.width);
    let hw = h * w;
    let bg: Vec<f64> = match background {
        Some(b) if b.shape() == [3, h, w] => b.data().to_vec(),
        Some(b) => return Err(Error::shape("rasterize_soft", format!("background {:?} vs [3, {h}, {w}]", b.shape()))),
        None => (0..3).flat_map(|ch| std::iter::repeat(cfg.background[ch]).take(hw)).collect(),
    };
    let tex_res = ts[1];
    let ctx = ctx(cam, light, cfg, tex_res);
    let margin = (cfg.cull * cfg.sigma).sqrt() * w as f64 / 2.0;
    let vdata = vt.data();
    let bins = bin_faces(cam, vdata, faces, cfg.znear, margin);
    let face_tex = tex_res * tex_res * 3;
    let tex = tt.data();

    let rows = par::map_range(h, |r| {
        let mut out = Vec::new();
        for c in 0..w {
            let p = r * w + c;
            if bins[p].is_empty() {
                continue;
            }
            let px = pixel_center(cam, p);
            let mut frags: Vec<(usize, Frag<f64>)> = bins[p]
                .iter()
                .filter_map(|&fi| fragment(corners(vdata, faces[fi], |x| x), px, &ctx).map(|f| (fi, f)))
                .collect();
            if frags.is_empty() {
                continue;
            }
            frags.sort_by(|a, b| b.1.zn.total_cmp(&a.1.zn).then(a.0.cmp(&b.0)));
            frags.truncate(cfg.max_faces);
            let ids: Vec<usize> = frags.iter().map(|(fi, _)| *fi).collect();
            let colored: Vec<(Frag<f64>, [f64; 3])> = frags
                .into_iter()
                .map(|(fi, f)| {
                    let c = texel_color(&f, tex, fi * face_tex);
                    (f, c)
                })
                .collect();
            let b = blend(&colored, [bg[p], bg[hw + p], bg[2 * hw + p]], cfg);
            out.push((p, ids, b));
        }
        out
    });

    let mut data = vec![0.0; 4 * hw];
    data[..3 * hw].copy_from_slice(&bg);
    let mut depth = vec![f64::INFINITY; hw];
    let mut active = Vec::new();
    for (p, ids, b) in rows.into_iter().flatten() {
        for ch in 0..3 {
            data[ch * hw + p] = b.rgb[ch];
        }
        data[3 * hw + p] = b.alpha;
        depth[p] = b.depth;
        active.push(PixelState { pixel: p, faces: ids });
    }
    let out = Tensor::from_parts(vec![4, h, w], data);
    let op = SoftBackward {
        faces: faces.to_vec(),
        cam: cam.clone(),
        light: *light,
        cfg: cfg.clone(),
        tex_res,
        background: bg,
        active,
    };
    let rgba = vertices.graph().record(&[vertices, textures], out, op);
    Ok(SoftRender { rgba, depth })
}

/// Z-buffered rendering of world-frame meshes. Returns `[3, H, W]` colors
/// and per-pixel camera depth (`+inf` on background).
pub fn rasterize_hard(
    meshes: &[&TexturedMesh],
    cam: &CameraModel,
    light: &DirectionalLight,
    background: [f64; 3],
    znear: f64,
) -> (Tensor, Vec<f64>) {
    let (h, w) = (cam.height, cam.width);
    let hw = h * w;
    let mut rgb: Vec<f64> = (0..3).flat_map(|ch| std::iter::repeat(background[ch]).take(hw)).collect();
    let mut depth = vec![f64::INFINITY; hw];
    for mesh in meshes {
        let tex_res = mesh.texture_res();
        let face_tex = tex_res * tex_res * 3;
        let cfg = SoftRasterConfig { znear, ..SoftRasterConfig::default() };
        let ctx = Ctx { cull: 0.0, ..ctx(cam, light, &cfg, tex_res) };
        let v: Vec<f64> = mesh.vertices().iter().flatten().copied().collect();
        let bins = bin_faces(cam, &v, mesh.faces(), znear, 0.0);
        let hits = par::map_range(h, |r| {
            let mut out = Vec::new();
            for c in 0..w {
                let p = r * w + c;
                let px = pixel_center(cam, p);
                let mut best: Option<(f64, [f64; 3])> = None;
                for &fi in &bins[p] {
                    let Some(f) = fragment(corners(&v, mesh.faces()[fi], |x| x), px, &ctx) else { continue };
                    if f.inside && best.map_or(true, |(z, _)| f.z < z) {
                        best = Some((f.z, texel_color(&f, mesh.textures(), fi * face_tex)));
                    }
                }
                if let Some(b) = best {
                    out.push((p, b));
                }
            }
            out
        });
        for (p, (z, c)) in hits.into_iter().flatten() {
            if z < depth[p] {
                depth[p] = z;
                for ch in 0..3 {
                    rgb[ch * hw + p] = c[ch];
                }
            }
        }
    }
    (Tensor::from_parts(vec![3, h, w], rgb), depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Graph};
    use crate::geometry::{make_icosphere, transform_mesh, Pose};

    fn cam(h: usize, w: usize) -> CameraModel {
        CameraModel::forward_facing([0.0, 0.0, 0.0], [w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0], h, w).unwrap()
    }

    fn light() -> DirectionalLight {
        DirectionalLight::new([1.0, -0.3, -0.5], 0.7, 0.3).unwrap()
    }

    fn triangle_mesh() -> TexturedMesh {
        // facing the camera (normal toward -x)
        TexturedMesh::new(
            vec![[5.0, 1.0, -1.0], [5.0, -1.0, -1.0], [5.0, 0.0, 1.0]],
            vec![[0, 2, 1]],
            1,
            vec![0.9, 0.2, 0.1],
        )
        .unwrap()
    }

    fn render(mesh: &TexturedMesh, cam: &CameraModel, cfg: &SoftRasterConfig) -> (Tensor, Vec<f64>) {
        let g = Graph::new();
        let v = g.constant(mesh.vertex_tensor());
        let t = g.constant(mesh.texture_tensor());
        let r = rasterize_soft(v, t, mesh.faces(), cam, &light(), cfg, None).unwrap();
        ((*r.rgba.tensor()).clone(), r.depth)
    }

    #[test]
    fn sharp_limit_matches_hard_rasterizer() {
        let m = triangle_mesh();
        let c = cam(32, 32);
        let cfg = SoftRasterConfig { sigma: 1e-9, gamma: 1e-9, background: [0.0, 0.5, 1.0], ..Default::default() };
        let (soft, _) = render(&m, &c, &cfg);
        let (hard, hdepth) = rasterize_hard(&[&m], &c, &light(), [0.0, 0.5, 1.0], 0.1);
        let hw = 32 * 32;
        let mut inside = 0;
        for p in 0..hw {
            if hdepth[p].is_finite() {
                inside += 1;
            }
            // exact equality away from edges
            let a = soft.data()[3 * hw + p];
            if a > 1.0 - 1e-6 || a < 1e-6 {
                for ch in 0..3 {
                    assert!((soft.data()[ch * hw + p] - hard.data()[ch * hw + p]).abs() < 1e-6, "pixel {p}");
                }
            }
        }
        assert!(inside > 20);
    }

    #[test]
    fn far_pixels_are_background() {
        let m = triangle_mesh();
        let c = cam(32, 32);
        let cfg = SoftRasterConfig { background: [0.25, 0.5, 0.75], ..Default::default() };
        let (soft, depth) = render(&m, &c, &cfg);
        let hw = 32 * 32;
        assert!(soft.data()[3 * hw] < 1e-3);
        assert_eq!([soft.data()[0], soft.data()[hw], soft.data()[2 * hw]], [0.25, 0.5, 0.75]);
        assert!(depth[0].is_infinite());
    }

    #[test]
    fn faces_behind_camera_render_nothing() {
        let m = transform_mesh(&triangle_mesh(), &Pose::new([-10.0, 0.0, 0.0], 0.0));
        let (soft, _) = render(&m, &cam(16, 16), &SoftRasterConfig::default());
        assert!(soft.data()[3 * 256..].iter().all(|a| *a == 0.0));
    }

    #[test]
    fn alpha_decreases_away_from_silhouette() {
        let m = triangle_mesh();
        let c = cam(32, 32);
        let cfg = SoftRasterConfig { sigma: 3e-3, ..Default::default() };
        let (soft, _) = render(&m, &c, &cfg);
        let hw = 32 * 32;
        // walk right from the centroid column along the middle row
        let row = 16;
        let alphas: Vec<f64> = (16..32).map(|col| soft.data()[3 * hw + row * 32 + col]).collect();
        assert!(alphas.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{alphas:?}");
        assert!(alphas[0] > 0.5 && *alphas.last().unwrap() < 0.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 20 faces on a 32x32 image
        let sphere = make_icosphere(0, 2);
        let scaled = sphere.with_vertices(sphere.vertices().iter().map(|v| v.map(|c| c * 0.8)).collect()).unwrap();
        let m = transform_mesh(&scaled, &Pose::new([4.0, 0.2, -0.1], 0.4));
        let m = m
            .with_textures((0..m.textures().len()).map(|i| 0.2 + 0.6 * ((i as f64) * 0.37).sin().abs()).collect())
            .unwrap();
        assert_eq!(m.faces().len(), 20);
        let c = cam(32, 32);
        let cfg = SoftRasterConfig { sigma: 1e-3, gamma: 1e-2, ..Default::default() };
        let bgimg = Tensor::new(&[3, 32, 32], (0..3072).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap();
        let weights = Tensor::new(&[4, 32, 32], (0..4096).map(|i| ((i as f64) * 0.13).cos()).collect()).unwrap();
        let faces = m.faces().to_vec();
        let tex = m.texture_tensor();
        let verts = m.vertex_tensor();
        let rv = grad_check(
            |g, v| {
                let t = g.constant(tex.clone());
                let r = rasterize_soft(v, t, &faces, &c, &light(), &cfg, Some(&bgimg))?;
                r.rgba.mul(g.constant(weights.clone())).map(|x| x.sum())
            },
            &verts,
            1e-7,
            1e-3,
        )
        .unwrap();
        assert!(rv.passed, "{rv:?}");
        let rt = grad_check(
            |g, t| {
                let v = g.constant(verts.clone());
                let r = rasterize_soft(v, t, &faces, &c, &light(), &cfg, Some(&bgimg))?;
                r.rgba.mul(g.constant(weights.clone())).map(|x| x.sum())
            },
            &tex,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(rt.passed, "{rt:?}");
    }

    #[test]
    fn default_sharpness_gradients_match() {
        let sphere = make_icosphere(0, 1);
        let m = transform_mesh(&sphere, &Pose::new([6.0, 0.0, 0.0], 0.2));
        let c = cam(32, 32);
        let cfg = SoftRasterConfig::default();
        let faces = m.faces().to_vec();
        let tex = m.texture_tensor();
        let r = grad_check(
            |g, v| {
                let t = g.constant(tex.clone());
                let r = rasterize_soft(v, t, &faces, &c, &light(), &cfg, None)?;
                Ok(r.rgba.sum())
            },
            &m.vertex_tensor(),
            1e-7,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
