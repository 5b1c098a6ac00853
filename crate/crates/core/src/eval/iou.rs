//! Rotated rectangle IoU by convex polygon clipping.

use crate::detector::DetectionBox;

type P2 = [f64; 2];

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(p: &[P2]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>() / 2.0
}

/// Sutherland–Hodgman: `subject` clipped by the counter-clockwise convex `clip`.
fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn intersection_area(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let poly = clip_polygon(&a.corners(), &b.corners());
    if poly.len() < 3 {
        0.0
    } else {
        polygon_area(&poly).abs()
    }
}

/// Intersection over union of two BEV boxes; 0 if either has zero area.
pub fn rotated_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    // cheap reject on circumscribed circles
    let r = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    if (a.x - b.x).hypot(a.y - b.y) >= r {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}
