use serde::{Deserialize, Serialize};

use crate::eval::rotated_iou;

/// Oriented BEV box. `length` runs along `heading`, `width` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
    pub score: f64,
}

impl DetectionBox {
    pub fn new(x: f64, y: f64, length: f64, width: f64, heading: f64, score: f64) -> Self {
        DetectionBox { x, y, length, width, heading, score }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Counter-clockwise corners.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| [self.x + c * a - s * b, self.y + s * a + c * b])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        (c * dx + s * dy).abs() <= self.length / 2.0 && (-s * dx + c * dy).abs() <= self.width / 2.0
    }
}

/// Greedy suppression in descending score order (ties by input order).
pub fn nms(proposals: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for i in order {
        let p = proposals[i];
        if kept.iter().all(|k| rotated_iou(k, &p) <= iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_examples() {
        let a = DetectionBox::new(0.0, 0.0, 4.0, 2.0, 0.0, 0.9);
        let b = DetectionBox { score: 0.8, ..a };
        assert_eq!(nms(&[b, a], 0.1), vec![a]);
        let far = DetectionBox::new(10.0, 0.0, 4.0, 2.0, 0.0, 0.3);
        assert_eq!(nms(&[a, far], 0.1).len(), 2);
        assert!(nms(&[], 0.1).is_empty());
    }

    #[test]
    fn corners_ccw() {
        let c = DetectionBox::new(1.0, 1.0, 4.0, 2.0, 0.7, 1.0).corners();
        let area: f64 = (0..4).map(|i| c[i][0] * c[(i + 1) % 4][1] - c[(i + 1) % 4][0] * c[i][1]).sum::<f64>() / 2.0;
        assert!((area - 8.0).abs() < 1e-12);
    }
}
