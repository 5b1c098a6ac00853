//! 8-bit RGB PNG for images and 16-bit PGM (millimeters) for depth.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use super::DEPTH_FAR;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `[3, H, W]` image in `[0, 1]` rounded to 8 bits.
pub fn write_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_png", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            buf.push((pixels.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format("png", e.to_string());
    enc.write_header().map_err(fail)?.write_image_data(&buf).map_err(fail)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = buf[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Binary PGM, maxval 65535, big-endian samples in millimeters; depths at
/// or beyond [`DEPTH_FAR`] saturate.
pub fn write_depth_pgm(depth: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if depth.len() != height * width {
        return Err(Error::shape("write_depth_pgm", format!("{} values for {height}x{width}", depth.len())));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for d in depth {
        let mm = (d.min(DEPTH_FAR).max(0.0) * 1000.0).round() as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(depth in meters, height, width)`.
pub fn read_depth_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format("pgm", d.to_string());
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ascii"))?.to_string());
    }
    i += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected P5 with maxval 65535"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(i..).ok_or_else(|| bad("missing payload"))?;
    if body.len() != 2 * w * h {
        return Err(bad("payload size does not match dimensions"));
    }
    let depth = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0).collect();
    Ok((depth, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::new(&[3, 2, 3], (0..18).map(|i| (i * 13 % 256) as f64 / 255.0).collect()).unwrap();
        write_png(&t, &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), t);
    }

    #[test]
    fn pgm_round_trip_in_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let d = vec![0.001, 7.25, 65.535, 12.345];
        write_depth_pgm(&d, 2, 2, &p).unwrap();
        assert_eq!(read_depth_pgm(&p).unwrap(), (d, 2, 2));
        write_depth_pgm(&[f64::INFINITY], 1, 1, &p).unwrap();
        assert_eq!(read_depth_pgm(&p).unwrap().0, vec![65.535]);
    }
}
