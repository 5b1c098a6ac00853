//! Nearest-projected-pixel depth densification and occlusion-aware
//! compositing of rendered pixels onto an image.

use super::CameraModel;
use crate::autodiff::{Backward, Value};
use crate::error::{Error, Result};
use crate::lidar::LidarSweep;
use crate::tensor::Tensor;

/// Depth assigned where nothing is observed; also the largest depth the
/// 16-bit millimeter PGM format can hold.
pub const DEPTH_FAR: f64 = 65.535;

/// Projects the sweep into the image; pixels hit by a point keep the
/// nearest such depth, all others take the depth of the closest hit pixel
/// (ties broken by row-major order). An empty projection yields `far`.
pub fn densify_depth(sweep: &LidarSweep, cam: &CameraModel, far: f64) -> Vec<f64> {
    let (h, w) = (cam.height, cam.width);
    let mut anchor = vec![f64::INFINITY; h * w];
    for p in &sweep.points {
        let pc = cam.to_camera(*p);
        if pc[2] <= 0.0 {
            continue;
        }
        let (u, v) = cam.pixel(pc);
        if u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64 {
            let i = v as usize * w + u as usize;
            anchor[i] = anchor[i].min(pc[2]);
        }
    }
    if anchor.iter().all(|a| a.is_infinite()) {
        return vec![far; h * w];
    }
    let rows = crate::par::map_range(h, |r| {
        (0..w)
            .map(|c| {
                let own = anchor[r * w + c];
                if own.is_finite() {
                    return own;
                }
                nearest_anchor(&anchor, h, w, r as isize, c as isize)
            })
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

/// Exact Euclidean nearest finite entry by expanding square rings.
fn nearest_anchor(anchor: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let mut best: Option<(isize, usize, f64)> = None;
    let max_ring = h.max(w) as isize;
    for ring in 1..=max_ring {
        if let Some((d2, _, _)) = best {
            if ring * ring > d2 {
                break;
            }
        }
        let mut visit = |rr: isize, cc: isize| {
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                return;
            }
            let i = rr as usize * w + cc as usize;
            if anchor[i].is_finite() {
                let d2 = (rr - r).pow(2) + (cc - c).pow(2);
                if best.map_or(true, |(bd, bi, _)| (d2, i) < (bd, bi)) {
                    best = Some((d2, i, anchor[i]));
                }
            }
        };
        for cc in c - ring..=c + ring {
            visit(r - ring, cc);
            visit(r + ring, cc);
        }
        for rr in r - ring + 1..r + ring {
            visit(rr, c - ring);
            visit(rr, c + ring);
        }
    }
    best.map(|b| b.2).expect("at least one anchor exists")
}

/// Pixels where the render is kept: `alpha > 0.5` and in front of the scene.
pub fn keep_mask(alpha: &[f64], rendered_depth: &[f64], scene_depth: &[f64]) -> Vec<bool> {
    alpha
        .iter()
        .zip(rendered_depth)
        .zip(scene_depth)
        .map(|((a, rd), sd)| *a > 0.5 && rd < sd)
        .collect()
}

struct CompositeBackward {
    keep: Vec<bool>,
    original: Tensor,
}

impl Backward for CompositeBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let hw = self.keep.len();
        let rgba = inputs[0].data();
        let mut g = vec![0.0; 4 * hw];
        for p in (0..hw).filter(|&p| self.keep[p]) {
            let a = rgba[3 * hw + p];
            for ch in 0..3 {
                let go = grad.data()[ch * hw + p];
                g[ch * hw + p] = a * go;
                g[3 * hw + p] += go * (rgba[ch * hw + p] - self.original.data()[ch * hw + p]);
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g))]
    }
}

/// `alpha * rgb + (1 - alpha) * original` where kept, `original` elsewhere.
/// `rgba` is `[4, H, W]`; the result is `[3, H, W]`.
pub fn composite_image<'g>(
    original: &Tensor,
    rgba: Value<'g>,
    rendered_depth: &[f64],
    scene_depth: &[f64],
) -> Result<Value<'g>> {
    let s = original.shape();
    let rt = rgba.tensor();
    if s.len() != 3 || s[0] != 3 || rt.shape() != [4, s[1], s[2]] {
        return Err(Error::shape("composite_image", format!("original {s:?}, rendered {:?}", rt.shape())));
    }
    let hw = s[1] * s[2];
    if rendered_depth.len() != hw || scene_depth.len() != hw {
        return Err(Error::shape("composite_image", "depth maps must have one value per pixel"));
    }
    let keep = keep_mask(&rt.data()[3 * hw..], rendered_depth, scene_depth);
    let mut out = original.data().to_vec();
    for p in (0..hw).filter(|&p| keep[p]) {
        let a = rt.data()[3 * hw + p];
        for ch in 0..3 {
            out[ch * hw + p] = a * rt.data()[ch * hw + p] + (1.0 - a) * original.data()[ch * hw + p];
        }
    }
    let out = Tensor::from_parts(s.to_vec(), out);
    Ok(rgba.graph().record(&[rgba], out, CompositeBackward { keep, original: original.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Graph};
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        CameraModel::new([10.0, 10.0, 4.0, 3.0], eye, [0.0; 3], 6, 8).unwrap()
    }

    fn sweep(points: Vec<[f64; 3]>) -> LidarSweep {
        let n = points.len();
        LidarSweep::new(points, (0..n).collect(), n.max(1)).unwrap()
    }

    #[test]
    fn anchored_pixels_keep_exact_depth() {
        // (u, v) = (4.5, 3.5) -> pixel (3, 4)
        let d = densify_depth(&sweep(vec![[0.05 * 7.25, 0.05 * 7.25, 7.25]]), &cam(), DEPTH_FAR);
        assert_eq!(d[3 * 8 + 4], 7.25);
        assert!(d.iter().all(|x| *x == 7.25));
    }

    #[test]
    fn empty_projection_is_far() {
        let d = densify_depth(&sweep(vec![[0.0, 0.0, -3.0]]), &cam(), DEPTH_FAR);
        assert!(d.iter().all(|x| *x == DEPTH_FAR));
    }

    fn brute_force(anchor: &[(usize, usize, f64)], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let best = anchor
                    .iter()
                    .map(|&(ar, ac, z)| {
                        let d2 = (ar as isize - r as isize).pow(2) + (ac as isize - c as isize).pow(2);
                        (d2, ar * w + ac, z)
                    })
                    .min_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)))
                    .unwrap();
                out[r * w + c] = best.2;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_nearest_neighbor_oracle(pts in prop::collection::vec((0usize..6, 0usize..8, 1.0f64..50.0), 1..12)) {
            let c = cam();
            // unique pixels so the anchor rule is unambiguous
            let mut seen = std::collections::BTreeMap::new();
            for (r, col, z) in pts {
                seen.entry((r, col)).or_insert(z);
            }
            let anchors: Vec<(usize, usize, f64)> = seen.into_iter().map(|((r, col), z)| (r, col, z)).collect();
            let points = anchors
                .iter()
                .map(|&(r, col, z)| [(col as f64 + 0.5 - 4.0) / 10.0 * z, (r as f64 + 0.5 - 3.0) / 10.0 * z, z])
                .collect();
            let s = sweep(points);
            let d = densify_depth(&s, &c, DEPTH_FAR);
            prop_assert_eq!(&d, &brute_force(&anchors, 6, 8));
            prop_assert_eq!(&d, &densify_depth(&s, &c, DEPTH_FAR));
        }
    }

    #[test]
    fn composite_examples() {
        let g = Graph::new();
        let orig = Tensor::new(&[3, 1, 3], vec![0.2; 9]).unwrap();
        let rgba = g.param(Tensor::new(&[4, 1, 3], vec![0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 1.0, 1.0, 0.0]).unwrap());
        let out = composite_image(&orig, rgba, &[3.0, 12.0, 3.0], &[10.0; 3]).unwrap();
        let o = out.tensor();
        // kept, occluded, transparent
        assert_eq!(&o.data()[..3], &[0.9, 0.2, 0.2]);
        let zero = g.constant(Tensor::new(&[4, 1, 3], vec![0.0; 12]).unwrap());
        let same = composite_image(&orig, zero, &[1.0; 3], &[10.0; 3]).unwrap();
        assert_eq!(*same.tensor(), orig);
    }

    #[test]
    fn composite_gradient() {
        let orig = Tensor::new(&[3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let x = Tensor::new(&[4, 2, 2], vec![0.3, 0.5, 0.7, 0.2, 0.1, 0.9, 0.4, 0.6, 0.8, 0.2, 0.3, 0.5, 0.9, 0.7, 0.2, 0.8]).unwrap();
        let r = grad_check(
            |g, v| {
                let out = composite_image(&orig, v, &[1.0; 4], &[2.0, 2.0, 0.5, 2.0])?;
                let w = g.constant(Tensor::new(&[3, 2, 2], (0..12).map(|i| (i as f64).sin()).collect())?);
                Ok(out.mul(w)?.sum())
            },
            &x,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
