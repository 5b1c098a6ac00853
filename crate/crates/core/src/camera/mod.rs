//! Pinhole camera, directional shading, soft rasterization of textured
//! meshes, depth densification from LiDAR and occlusion-aware compositing.

mod depth;
mod io;
mod raster;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Value};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::jet::Real;
use crate::tensor::Tensor;

pub use depth::{composite_image, densify_depth, keep_mask, DEPTH_FAR};
pub use io::{read_depth_pgm, read_png, write_depth_pgm, write_png};
pub use raster::{rasterize_hard, rasterize_soft, SoftRasterConfig, SoftRender};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation; camera frame is x right, y down, z forward.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    pub fn new(
        [fx, fy, cx, cy]: [f64; 4],
        rotation: [[f64; 3]; 3],
        translation: Vec3,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!("principal point ({cx}, {cy}) outside {width}x{height}")));
        }
        Ok(CameraModel { fx, fy, cx, cy, rotation, translation, height, width })
    }

    /// Camera at `position` looking along world +x with world +z up.
    pub fn forward_facing(position: Vec3, intrinsics: [f64; 4], height: usize, width: usize) -> Result<Self> {
        let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            translation[i] = -(0..3).map(|j| rotation[i][j] * position[j]).sum::<f64>();
        }
        Self::new(intrinsics, rotation, translation, height, width)
    }

    pub fn to_camera<R: Real>(&self, p: [R; 3]) -> [R; 3] {
        let r = &self.rotation;
        let mut out = [R::cst(0.0); 3];
        for i in 0..3 {
            out[i] = p[0] * r[i][0] + p[1] * r[i][1] + p[2] * r[i][2] + self.translation[i];
        }
        out
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point with `z > 0`.
    pub fn pixel<R: Real>(&self, pc: [R; 3]) -> (R, R) {
        (pc[0] / pc[2] * self.fx + self.cx, pc[1] / pc[2] * self.fy + self.cy)
    }

    /// Camera center in the world frame.
    pub fn center(&self) -> Vec3 {
        let r = &self.rotation;
        let t = self.translation;
        [0, 1, 2].map(|j| -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit vector from the light toward the scene.
    pub direction: Vec3,
    pub diffuse: f64,
    pub ambient: f64,
}

impl DirectionalLight {
    pub fn new(direction: Vec3, diffuse: f64, ambient: f64) -> Result<Self> {
        let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
        if !(n > 0.0) || !(diffuse >= 0.0) || !(ambient >= 0.0) || diffuse + ambient > 1.5 {
            return Err(Error::invalid(format!(
                "bad light: direction {direction:?}, diffuse {diffuse}, ambient {ambient}"
            )));
        }
        Ok(DirectionalLight { direction: direction.map(|c| c / n), diffuse, ambient })
    }

    /// `clamp(ambient + diffuse * max(0, -n.dir), 0, 1)` for a unit normal.
    pub fn intensity<R: Real>(&self, normal: [R; 3]) -> R {
        let d = self.direction;
        let cos = -(normal[0] * d[0] + normal[1] * d[1] + normal[2] * d[2]);
        let lit = if cos.val() > 0.0 { cos * self.diffuse + self.ambient } else { R::cst(self.ambient) };
        if lit.val() > 1.0 {
            R::cst(1.0)
        } else if lit.val() < 0.0 {
            R::cst(0.0)
        } else {
            lit
        }
    }
}

pub fn shade_directional(base_color: [f64; 3], normal: Vec3, light: &DirectionalLight) -> [f64; 3] {
    let k = light.intensity(normal);
    base_color.map(|c| c * k)
}

/// Image held as `[3, H, W]` in `[0, 1]`, with optional per-pixel depth
/// (row-major, meters).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraImage {
    pub pixels: Tensor,
    pub dense_depth: Option<Vec<f64>>,
}

impl CameraImage {
    pub fn new(pixels: Tensor, dense_depth: Option<Vec<f64>>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("camera image", format!("expected [3, H, W], got {s:?}")));
        }
        if pixels.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        if let Some(d) = &dense_depth {
            if d.len() != s[1] * s[2] || d.iter().any(|z| !(*z > 0.0)) {
                return Err(Error::invalid("dense depth must be positive with one value per pixel"));
            }
        }
        Ok(CameraImage { pixels, dense_depth })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

struct ProjectBackward {
    cam: CameraModel,
}

impl Backward for ProjectBackward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let r = &self.cam.rotation;
        let mut gp = vec![0.0; inputs[0].numel()];
        for (k, (row, g)) in out.data().chunks(3).zip(grad.data().chunks(3)).enumerate() {
            if !row[0].is_finite() {
                continue;
            }
            let p = &inputs[0].data()[3 * k..3 * k + 3];
            let pc = self.cam.to_camera([p[0], p[1], p[2]]);
            let z = pc[2];
            let gc = [
                g[0] * self.cam.fx / z,
                g[1] * self.cam.fy / z,
                g[2] - g[0] * self.cam.fx * pc[0] / (z * z) - g[1] * self.cam.fy * pc[1] / (z * z),
            ];
            for j in 0..3 {
                gp[3 * k + j] = (0..3).map(|i| r[i][j] * gc[i]).sum();
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gp))]
    }
}

/// Projects world points `[K, 3]` to `[K, 3]` rows of `(u, v, depth)`. Rows
/// with depth `<= 0` are flagged invalid and carry NaN pixel coordinates.
pub fn project_points<'g>(points: Value<'g>, cam: &CameraModel) -> Result<(Value<'g>, Vec<bool>)> {
    let t = points.tensor();
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(Error::shape("project_points", format!("points {:?}", t.shape())));
    }
    let mut valid = Vec::with_capacity(t.shape()[0]);
    let mut data = Vec::with_capacity(t.numel());
    for p in t.data().chunks(3) {
        let pc = cam.to_camera([p[0], p[1], p[2]]);
        if pc[2] > 0.0 {
            let (u, v) = cam.pixel(pc);
            data.extend_from_slice(&[u, v, pc[2]]);
            valid.push(true);
        } else {
            data.extend_from_slice(&[f64::NAN, f64::NAN, pc[2]]);
            valid.push(false);
        }
    }
    let out = Tensor::from_parts(t.shape().to_vec(), data);
    Ok((points.graph().record(&[points], out, ProjectBackward { cam: cam.clone() }), valid))
}
