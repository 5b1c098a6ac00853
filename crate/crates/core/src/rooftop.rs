//! Host vehicle box fitting and rooftop placement.

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose, Vec3};

/// Height of the rooftop band measured down from the highest point.
pub const ROOF_BAND: f64 = 0.2;
/// Maximum heading deviation searched around the prior.
pub const HEADING_WINDOW: f64 = 15.0 * std::f64::consts::PI / 180.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleFit {
    pub center: Vec3,
    pub heading: f64,
    /// length (along heading), width, height
    pub dims: Vec3,
    /// Points the box was fitted to.
    pub points: Vec<Vec3>,
}

/// Footprint extents `(lo_along, hi_along, lo_across, hi_across)` at a heading.
fn extents(points: &[Vec3], heading: f64) -> [f64; 4] {
    let (s, c) = heading.sin_cos();
    let mut e = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in points {
        let a = c * p[0] + s * p[1];
        let b = -s * p[0] + c * p[1];
        e = [e[0].min(a), e[1].max(a), e[2].min(b), e[3].max(b)];
    }
    e
}

fn area(points: &[Vec3], heading: f64) -> f64 {
    let e = extents(points, heading);
    (e[1] - e[0]) * (e[3] - e[2])
}

/// Tight heading-aligned box: minimum footprint area over headings within
/// [`HEADING_WINDOW`] of `prior_heading`.
pub fn fit_vehicle_box(points: &[Vec3], prior_heading: f64) -> Result<VehicleFit> {
    if points.len() < 10 {
        return Err(Error::invalid(format!("box fit needs at least 10 points, got {}", points.len())));
    }
    // coarse grid, then golden-section refinement around the best cell
    let steps = 120;
    let h = 2.0 * HEADING_WINDOW / steps as f64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=steps {
        let off = -HEADING_WINDOW + i as f64 * h;
        let a = area(points, prior_heading + off);
        if a < best.0 {
            best = (a, off);
        }
    }
    let (mut lo, mut hi) = ((best.1 - h).max(-HEADING_WINDOW), (best.1 + h).min(HEADING_WINDOW));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if area(points, prior_heading + m1) <= area(points, prior_heading + m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let off = (lo + hi) / 2.0;
    let heading = prior_heading + if area(points, prior_heading + off) <= best.0 { off } else { best.1 };
    let e = extents(points, heading);
    let (s, c) = heading.sin_cos();
    let (a, b) = ((e[0] + e[1]) / 2.0, (e[2] + e[3]) / 2.0);
    let zlo = points.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let zhi = points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let dims = [e[1] - e[0], e[3] - e[2], zhi - zlo];
    if dims.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("degenerate vehicle cloud"));
    }
    Ok(VehicleFit {
        center: [c * a - s * b, s * a + c * b, (zlo + zhi) / 2.0],
        heading: normalize_angle(heading),
        dims,
        points: points.to_vec(),
    })
}

/// Placement pose: x/y at the centroid of points in the top [`ROOF_BAND`],
/// z at the band top, heading from the fit.
pub fn rooftop_pose(fit: &VehicleFit) -> Result<Pose> {
    if !(fit.dims[2] > ROOF_BAND) {
        return Err(Error::invalid(format!("vehicle height {} m is within the rooftop band", fit.dims[2])));
    }
    let top = fit.points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let band: Vec<&Vec3> = fit.points.iter().filter(|p| p[2] >= top - ROOF_BAND).collect();
    let n = band.len() as f64;
    let x = band.iter().map(|p| p[0]).sum::<f64>() / n;
    let y = band.iter().map(|p| p[1]).sum::<f64>() / n;
    Ok(Pose::new([x, y, top], fit.heading))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Surface samples of an axis-aligned box centered at the origin, base on z = 0.
    fn box_cloud(l: f64, w: f64, h: f64) -> Vec<Vec3> {
        let n = 12;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
                let x = -l / 2.0 + a * l;
                let y = -w / 2.0 + b * w;
                pts.push([x, y, 0.0]);
                pts.push([x, y, h]);
                let z = b * h;
                pts.push([x, -w / 2.0, z]);
                pts.push([x, w / 2.0, z]);
                pts.push([-l / 2.0, -w / 2.0 + a * w, z]);
                pts.push([l / 2.0, -w / 2.0 + a * w, z]);
            }
        }
        pts
    }

    fn rigid(points: &[Vec3], pose: &Pose) -> Vec<Vec3> {
        points.iter().map(|p| pose.apply(*p)).collect()
    }

    #[test]
    fn axis_aligned_dims() {
        let f = fit_vehicle_box(&box_cloud(4.5, 1.8, 1.5), 0.05).unwrap();
        for (d, e) in f.dims.iter().zip([4.5, 1.8, 1.5]) {
            assert!((d - e).abs() < 0.05, "{:?}", f.dims);
        }
        assert!(f.heading.abs() < 1e-3);
    }

    #[test]
    fn rotated_heading() {
        let pose = Pose::new([12.0, -3.0, 0.0], 30f64.to_radians());
        let f = fit_vehicle_box(&rigid(&box_cloud(4.5, 1.8, 1.5), &pose), 30f64.to_radians()).unwrap();
        assert!((f.heading.to_degrees() - 30.0).abs() < 1.0);
        assert!((f.center[0] - 12.0).abs() < 1e-6 && (f.center[1] + 3.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_vehicle_box(&box_cloud(4.5, 1.8, 1.5)[..9], 0.0).is_err());
    }

    #[test]
    fn roof_placement() {
        let cloud = box_cloud(4.5, 1.8, 1.5);
        let f = fit_vehicle_box(&cloud, 0.1).unwrap();
        let p = rooftop_pose(&f).unwrap();
        assert_eq!(p.translation[2], 1.5);
        assert!(p.translation[0].abs() < 1e-12 && p.translation[1].abs() < 1e-12);
        assert_eq!(p.heading, f.heading);
        let flat = fit_vehicle_box(&box_cloud(4.5, 1.8, 0.15), 0.0).unwrap();
        assert!(rooftop_pose(&flat).is_err());
    }

    #[test]
    fn band_centroid_of_uneven_roof() {
        // roof points only on the rear half: centroid shifts back
        let mut cloud: Vec<Vec3> = box_cloud(4.0, 2.0, 1.2).into_iter().filter(|p| p[2] < 1.0).collect();
        cloud.push([-1.0, 0.0, 1.4]);
        cloud.push([-2.0, 0.0, 1.3]);
        let f = fit_vehicle_box(&cloud, 0.0).unwrap();
        let p = rooftop_pose(&f).unwrap();
        assert_eq!(p.translation, [-1.5, 0.0, 1.4]);
    }

    proptest! {
        #[test]
        fn pose_is_equivariant(tx in -20.0f64..20.0, ty in -20.0f64..20.0, yaw in -3.0f64..3.0) {
            let cloud = box_cloud(4.2, 1.7, 1.45);
            let base = rooftop_pose(&fit_vehicle_box(&cloud, 0.0).unwrap()).unwrap();
            let g = Pose::new([tx, ty, 0.0], yaw);
            let moved = rooftop_pose(&fit_vehicle_box(&rigid(&cloud, &g), yaw).unwrap()).unwrap();
            let expect = g.apply(base.translation);
            for k in 0..3 {
                prop_assert!((moved.translation[k] - expect[k]).abs() < 1e-6);
            }
            prop_assert!(normalize_angle(moved.heading - base.heading - yaw).abs() < 1e-3);
            // inside the footprint and on the top surface
            prop_assert!((moved.translation[2] - 1.45).abs() < 0.05);
        }
    }
}
