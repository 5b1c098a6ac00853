//! JPEG-style lossy compression: per-channel 8x8 DCT, quantization with the
//! standard luminance table scaled by quality, inverse DCT, 8-bit output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA: [[f64; 8]; 8] = [
    [16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0],
    [12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0],
    [14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0],
    [14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0],
    [18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0],
    [24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0],
    [49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0],
    [72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0],
];

/// Quantization table for `quality` in `1..=100`.
pub fn quant_table(quality: u32) -> Result<[[f64; 8]; 8]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("quality {quality} outside 1..=100")));
    }
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    Ok(LUMA.map(|row| row.map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))))
}

fn basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT of an 8x8 block (`inverse` applies the transpose).
pub fn dct8(block: &[[f64; 8]; 8], inverse: bool) -> [[f64; 8]; 8] {
    let c = basis();
    let m = |i: usize, j: usize| if inverse { c[j][i] } else { c[i][j] };
    let mut tmp = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            tmp[i][j] = (0..8).map(|k| m(i, k) * block[k][j]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            out[i][j] = (0..8).map(|k| tmp[i][k] * m(j, k)).sum();
        }
    }
    out
}

/// Compresses a `[3, H, W]` image in `[0, 1]`; borders are padded by edge
/// replication and cropped back.
pub fn dct_compress(image: &Tensor, quality: u32) -> Result<Tensor> {
    let q = quant_table(quality)?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("dct_compress", format!("{s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let mut out = image.data().to_vec();
    for c in 0..ch {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let (y, x) = ((by + i).min(h - 1), (bx + j).min(w - 1));
                        *v = plane[y * w + x] * 255.0 - 128.0;
                    }
                }
                let mut coef = dct8(&block, false);
                for i in 0..8 {
                    for j in 0..8 {
                        coef[i][j] = (coef[i][j] / q[i][j]).round() * q[i][j];
                    }
                }
                let rec = dct8(&coef, true);
                for i in 0..8.min(h - by) {
                    for j in 0..8.min(w - bx) {
                        let v = ((rec[i][j] + 128.0).round().clamp(0.0, 255.0)) / 255.0;
                        out[c * h * w + (by + i) * w + bx + j] = v;
                    }
                }
            }
        }
    }
    Tensor::new(s, out)
}
