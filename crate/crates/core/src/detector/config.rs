use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// BEV extent (meters): forward `x`, lateral `y`, and the height band
    /// split into `z_slices` occupancy channels.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub z_slices: usize,
    pub cell: f64,
    /// Camera input `(H, W)`.
    pub image_size: [usize; 2],
    /// Image branch widths: first stride-2 conv, second stride-2 conv and
    /// residual stage.
    pub image_channels: [usize; 2],
    pub bev_channels: usize,
    pub fuse_channels: usize,
    /// Anchor `(length, width)` and headings.
    pub anchor_size: [f64; 2],
    pub anchor_headings: Vec<f64>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Non-local denoising after each image residual block.
    pub nonlocal: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            x_range: [0.0, 32.0],
            y_range: [-12.0, 12.0],
            z_range: [0.25, 2.65],
            z_slices: 4,
            cell: 0.5,
            image_size: [64, 192],
            image_channels: [16, 32],
            bev_channels: 24,
            fuse_channels: 32,
            anchor_size: [4.4, 1.8],
            anchor_headings: vec![0.0, std::f64::consts::FRAC_PI_2],
            score_threshold: 0.5,
            nms_iou: 0.1,
            positive_iou: 0.6,
            negative_iou: 0.45,
            nonlocal: false,
        }
    }
}

fn cells(range: [f64; 2], cell: f64) -> Option<usize> {
    let n = (range[1] - range[0]) / cell;
    (n >= 1.0 && (n - n.round()).abs() < 1e-9).then(|| n.round() as usize)
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || cells(self.x_range, self.cell).is_none() || cells(self.y_range, self.cell).is_none() {
            return Err(Error::invalid(format!(
                "cell {} must divide ranges {:?} x {:?}",
                self.cell, self.x_range, self.y_range
            )));
        }
        if !(self.z_range[1] > self.z_range[0]) || self.z_slices == 0 {
            return Err(Error::invalid("height band must be positive with at least one slice"));
        }
        if self.image_size.iter().any(|s| s % 4 != 0 || *s == 0) {
            return Err(Error::invalid(format!("image size {:?} must be positive multiples of 4", self.image_size)));
        }
        if self.image_channels.contains(&0) || self.bev_channels == 0 || self.fuse_channels == 0 {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.anchor_headings.is_empty() || self.anchor_size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("need at least one anchor with positive size"));
        }
        if !(self.negative_iou <= self.positive_iou) {
            return Err(Error::invalid("negative IoU threshold above positive threshold"));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        cells(self.x_range, self.cell).unwrap_or(0)
    }

    pub fn ny(&self) -> usize {
        cells(self.y_range, self.cell).unwrap_or(0)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_headings.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors_per_cell() * self.nx() * self.ny()
    }

    pub fn slice_height(&self) -> f64 {
        (self.z_range[1] - self.z_range[0]) / self.z_slices as f64
    }

    /// Cell index `ix * ny + iy` containing a point inside the BEV volume.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<usize> {
        let inside = p[0] >= self.x_range[0]
            && p[0] < self.x_range[1]
            && p[1] >= self.y_range[0]
            && p[1] < self.y_range[1]
            && p[2] >= self.z_range[0]
            && p[2] < self.z_range[1];
        if !inside {
            return None;
        }
        let ix = (((p[0] - self.x_range[0]) / self.cell) as usize).min(self.nx() - 1);
        let iy = (((p[1] - self.y_range[0]) / self.cell) as usize).min(self.ny() - 1);
        Some(ix * self.ny() + iy)
    }

    /// Cell center `(x, y)`.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (self.x_range[0] + (ix as f64 + 0.5) * self.cell, self.y_range[0] + (iy as f64 + 0.5) * self.cell)
    }

    /// Small configuration for fast tests.
    pub fn micro() -> Self {
        DetectorConfig {
            x_range: [0.0, 8.0],
            y_range: [-4.0, 4.0],
            z_range: [0.25, 2.65],
            z_slices: 2,
            cell: 1.0,
            image_size: [16, 32],
            image_channels: [4, 6],
            bev_channels: 4,
            fuse_channels: 6,
            ..Default::default()
        }
    }
}
