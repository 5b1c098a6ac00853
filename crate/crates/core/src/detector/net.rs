//! Forward pass: soft BEV occupancy, image backbone, point-wise projection
//! of image features into BEV, fused BEV backbone and anchor head.

use super::{BoundParams, DetectionBox, DetectorConfig};
use crate::autodiff::{Backward, ConvSpec, Value};
use crate::camera::{project_points, CameraModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-point trilinear taps `(flat output index, weight, d weight / d xyz)`.
fn voxel_taps(p: &[f64], cfg: &DetectorConfig) -> Vec<(usize, f64, [f64; 3])> {
    let inside = p[0] >= cfg.x_range[0]
        && p[0] < cfg.x_range[1]
        && p[1] >= cfg.y_range[0]
        && p[1] < cfg.y_range[1]
        && p[2] >= cfg.z_range[0]
        && p[2] < cfg.z_range[1];
    if !inside {
        return Vec::new();
    }
    let (nx, ny, ns) = (cfg.nx(), cfg.ny(), cfg.z_slices);
    let dz = cfg.slice_height();
    let axes = [
        ((p[0] - cfg.x_range[0]) / cfg.cell - 0.5, nx, 1.0 / cfg.cell),
        ((p[1] - cfg.y_range[0]) / cfg.cell - 0.5, ny, 1.0 / cfg.cell),
        ((p[2] - cfg.z_range[0]) / dz - 0.5, ns, 1.0 / dz),
    ];
    // per axis: (index, weight, d weight / d coordinate)
    let per_axis: Vec<[(isize, f64, f64); 2]> = axes
        .iter()
        .map(|&(f, _, scale)| {
            let i0 = f.floor();
            let t = f - i0;
            [(i0 as isize, 1.0 - t, -scale), (i0 as isize + 1, t, scale)]
        })
        .collect();
    let mut out = Vec::with_capacity(8);
    for a in per_axis[0] {
        for b in per_axis[1] {
            for c in per_axis[2] {
                let ok = [(a.0, nx), (b.0, ny), (c.0, ns)].iter().all(|&(i, n)| i >= 0 && (i as usize) < n);
                if !ok {
                    continue;
                }
                let w = a.1 * b.1 * c.1;
                let dw = [a.2 * b.1 * c.1, a.1 * b.2 * c.1, a.1 * b.1 * c.2];
                out.push(((c.0 as usize * nx + a.0 as usize) * ny + b.0 as usize, w, dw));
            }
        }
    }
    out
}

struct VoxelBackward {
    cfg: DetectorConfig,
}

impl Backward for VoxelBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let pts = inputs[0].data();
        let mut gp = vec![0.0; pts.len()];
        for (k, p) in pts.chunks(3).enumerate() {
            for (idx, _, dw) in voxel_taps(p, &self.cfg) {
                for j in 0..3 {
                    gp[3 * k + j] += grad.data()[idx] * dw[j];
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gp))]
    }
}

/// Soft occupancy `[z_slices, nx, ny]`: each point spreads trilinear weights
/// over neighbouring cell/slice centers; points outside the volume drop out.
pub fn voxelize_bev<'g>(points: Value<'g>, cfg: &DetectorConfig) -> Result<Value<'g>> {
    let t = points.tensor();
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(Error::shape("voxelize_bev", format!("points {:?}", t.shape())));
    }
    let mut out = vec![0.0; cfg.z_slices * cfg.nx() * cfg.ny()];
    for p in t.data().chunks(3) {
        for (idx, w, _) in voxel_taps(p, cfg) {
            out[idx] += w;
        }
    }
    let out = Tensor::from_parts(vec![cfg.z_slices, cfg.nx(), cfg.ny()], out);
    Ok(points.graph().record(&[points], out, VoxelBackward { cfg: cfg.clone() }))
}

fn conv<'g>(x: Value<'g>, p: &BoundParams<'g>, name: &str, spec: ConvSpec) -> Result<Value<'g>> {
    x.conv2d(p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), spec)
}

const S1: ConvSpec = ConvSpec { stride: 1, padding: 1, dilation: 1 };
const S2: ConvSpec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
const POINTWISE: ConvSpec = ConvSpec { stride: 1, padding: 0, dilation: 1 };

/// Image backbone on a `[3, H, W]` image in `[0, 1]`; output
/// `[C, H/4, W/4]`.
pub fn image_features<'g>(image: Value<'g>, p: &BoundParams<'g>, cfg: &DetectorConfig) -> Result<Value<'g>> {
    let [h, w] = cfg.image_size;
    if image.shape() != [3, h, w] {
        return Err(Error::shape("image_features", format!("image {:?} vs configured [3, {h}, {w}]", image.shape())));
    }
    let x = image.add_scalar(-0.5);
    let c1 = conv(x, p, "img.c1", S2)?.relu();
    let c2 = conv(c1, p, "img.c2", S2)?.relu();
    let r = conv(conv(c2, p, "img.r1a", S1)?.relu(), p, "img.r1b", S1)?;
    let mut f = c2.add(r)?.relu();
    if cfg.nonlocal {
        f = crate::defense::nonlocal_block(f, p, "img.nl")?;
    }
    Ok(f)
}

/// Image features gathered into BEV: every LiDAR point inside the BEV volume
/// with a valid projection samples `features` bilinearly at its pixel and
/// adds the sample to its cell. Returns `[C, nx, ny]` and the number of
/// contributing points per cell.
pub fn project_fuse<'g>(
    features: Value<'g>,
    points: Value<'g>,
    cam: &CameraModel,
    cfg: &DetectorConfig,
) -> Result<(Value<'g>, Vec<f64>)> {
    let fs = features.shape();
    if fs.len() != 3 {
        return Err(Error::shape("project_fuse", format!("features {fs:?}")));
    }
    let (c, fh, fw) = (fs[0], fs[1], fs[2]);
    let cells = cfg.nx() * cfg.ny();
    let g = points.graph();
    let pts = points.tensor();
    let mut sel = Vec::new();
    let mut cell_ids = Vec::new();
    for (k, p) in pts.data().chunks(3).enumerate() {
        let Some(cell) = cfg.cell_of([p[0], p[1], p[2]]) else { continue };
        let pc = cam.to_camera([p[0], p[1], p[2]]);
        if pc[2] <= 0.0 {
            continue;
        }
        let (u, v) = cam.pixel(pc);
        if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
            continue;
        }
        sel.push(k);
        cell_ids.push(cell);
    }
    let mut counts = vec![0.0; cells];
    for &cid in &cell_ids {
        counts[cid] += 1.0;
    }
    if sel.is_empty() {
        return Ok((g.constant(Tensor::zeros(&[c, cfg.nx(), cfg.ny()])), counts));
    }
    let (uvz, _) = project_points(points.gather_rows(&sel)?, cam)?;
    let (sx, sy) = (fw as f64 / cam.width as f64, fh as f64 / cam.height as f64);
    let to_feat = g.constant(Tensor::new(&[3, 2], vec![sx, 0.0, 0.0, sy, 0.0, 0.0])?);
    let coords = uvz.matmul(to_feat)?.add(g.constant(Tensor::from_vec(vec![-0.5, -0.5])))?;
    let sampled = features.bilinear_sample(coords)?;
    let bev = sampled.scatter_add_rows(&cell_ids, cells)?.transpose()?.reshape(&[c, cfg.nx(), cfg.ny()])?;
    Ok((bev, counts))
}

/// Dense head outputs for one scene.
pub struct Proposals<'g> {
    /// `[A * nx * ny]`, anchor-major.
    pub logits: Value<'g>,
    pub scores: Value<'g>,
    /// `[5 * A, nx, ny]`: `(dx, dy, dlength, dwidth, dheading)` per anchor.
    pub regression: Value<'g>,
    /// Decoded boxes with scores, one per anchor.
    pub boxes: Vec<DetectionBox>,
}

/// Anchor boxes in head output order.
pub fn anchors(cfg: &DetectorConfig) -> Vec<DetectionBox> {
    let mut out = Vec::with_capacity(cfg.anchor_count());
    for &h in &cfg.anchor_headings {
        for ix in 0..cfg.nx() {
            for iy in 0..cfg.ny() {
                let (x, y) = cfg.cell_center(ix, iy);
                out.push(DetectionBox::new(x, y, cfg.anchor_size[0], cfg.anchor_size[1], h, 0.0));
            }
        }
    }
    out
}

/// Box from anchor-relative offsets.
pub fn decode(anchor: &DetectionBox, d: [f64; 5], score: f64) -> DetectionBox {
    let diag = anchor.length.hypot(anchor.width);
    DetectionBox::new(
        anchor.x + d[0] * diag,
        anchor.y + d[1] * diag,
        anchor.length * d[2].clamp(-4.0, 4.0).exp(),
        anchor.width * d[3].clamp(-4.0, 4.0).exp(),
        anchor.heading + d[4],
        score,
    )
}

/// Offsets that [`decode`] maps `anchor` onto `target`; the heading term is
/// wrapped to `[-pi/2, pi/2)` since boxes are symmetric under half turns.
pub fn encode(anchor: &DetectionBox, target: &DetectionBox) -> [f64; 5] {
    let diag = anchor.length.hypot(anchor.width);
    let pi = std::f64::consts::PI;
    let dh = (target.heading - anchor.heading + pi / 2.0).rem_euclid(pi) - pi / 2.0;
    [
        (target.x - anchor.x) / diag,
        (target.y - anchor.y) / diag,
        (target.length / anchor.length).ln(),
        (target.width / anchor.width).ln(),
        dh,
    ]
}

/// Full forward pass. `points` may be `None` for an empty sweep.
pub fn forward<'g>(
    image: Value<'g>,
    points: Option<Value<'g>>,
    cam: &CameraModel,
    p: &BoundParams<'g>,
    cfg: &DetectorConfig,
) -> Result<Proposals<'g>> {
    let g = image.graph();
    let (nx, ny) = (cfg.nx(), cfg.ny());
    let feats = image_features(image, p, cfg)?;
    let c_img = feats.shape()[0];
    let (occ, fused) = match points {
        Some(pts) => {
            let occ = voxelize_bev(pts, cfg)?;
            let (fused, counts) = project_fuse(feats, pts, cam, cfg)?;
            let inv = Tensor::new(&[nx, ny], counts.iter().map(|n| 1.0 / n.max(1.0)).collect())?;
            (occ, fused.mul(g.constant(inv))?)
        }
        None => (
            g.constant(Tensor::zeros(&[cfg.z_slices, nx, ny])),
            g.constant(Tensor::zeros(&[c_img, nx, ny])),
        ),
    };
    // occupancy sums grow with point density; compress them
    let occ = occ.add_scalar(1.0).log();
    let b1 = conv(occ, p, "bev.c1", S1)?.relu();
    let f = Value::concat(&[b1, fused])?;
    let f2 = conv(f, p, "bev.c2", S1)?.relu();
    let f3 = conv(f2, p, "bev.c3", ConvSpec { stride: 1, padding: 2, dilation: 2 })?.relu();
    let f4 = conv(f3, p, "bev.c4", ConvSpec { stride: 1, padding: 4, dilation: 4 })?.relu().add(f2)?;
    let a = cfg.anchors_per_cell();
    let logits = conv(f4, p, "head.cls", POINTWISE)?.reshape(&[a * nx * ny])?;
    let regression = conv(f4, p, "head.reg", POINTWISE)?;
    let scores = logits.sigmoid();
    let boxes = {
        let s = scores.tensor();
        let r = regression.tensor();
        let cells = nx * ny;
        anchors(cfg)
            .iter()
            .enumerate()
            .map(|(i, an)| {
                let (ai, cell) = (i / cells, i % cells);
                let d = [0, 1, 2, 3, 4].map(|k| r.data()[(5 * ai + k) * cells + cell]);
                decode(an, d, s.data()[i])
            })
            .collect()
    };
    Ok(Proposals { logits, scores, regression, boxes })
}

/// Final detections: score threshold then NMS.
pub fn postprocess(boxes: &[DetectionBox], score_threshold: f64, nms_iou: f64) -> Vec<DetectionBox> {
    let cand: Vec<DetectionBox> = boxes.iter().filter(|b| b.score >= score_threshold).copied().collect();
    super::nms(&cand, nms_iou)
}
