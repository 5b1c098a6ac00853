//! Binary little-endian PLY (xyz as f64) plus a JSON sidecar carrying ray ids
//! and the sensor description.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LidarSpec, LidarSweep};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSidecar {
    pub ray_ids: Vec<usize>,
    pub spec: LidarSpec,
}

fn sidecar(ply: &Path) -> PathBuf {
    ply.with_extension("rays.json")
}

pub fn ply_bytes(points: &[[f64; 3]]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    for p in points {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn parse_ply(bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format("ply", "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("ply", "header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format("ply", "missing magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(Error::format("ply", format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::format("ply", e.to_string()))?);
            }
            ["element", other, ..] => return Err(Error::format("ply", format!("unexpected element {other}"))),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["comment", ..] | [] => {}
            _ => return Err(Error::format("ply", format!("bad header line {line:?}"))),
        }
    }
    let expected = [("double", "x"), ("double", "y"), ("double", "z")];
    if props.len() != 3 || props.iter().zip(expected).any(|(p, e)| p.0 != e.0 || p.1 != e.1) {
        return Err(Error::format("ply", format!("expected double x y z, got {props:?}")));
    }
    let n = count.ok_or_else(|| Error::format("ply", "missing vertex element"))?;
    let body = &bytes[end + END.len()..];
    if body.len() != n * 24 {
        return Err(Error::format("ply", format!("{} payload bytes for {n} vertices", body.len())));
    }
    Ok(body
        .chunks_exact(24)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap());
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// Writes `path` (PLY) and `path.rays.json`.
pub fn write_sweep(sweep: &LidarSweep, spec: &LidarSpec, path: &Path) -> Result<()> {
    fs::write(path, ply_bytes(&sweep.points)).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    let meta = SweepSidecar { ray_ids: sweep.ray_ids.clone(), spec: spec.clone() };
    fs::write(&side, serde_json::to_string(&meta)?).map_err(|e| Error::io(side, e))
}

/// Reads a sweep; without a sidecar, ray ids are rebuilt from `fallback`.
pub fn read_sweep(path: &Path, fallback: Option<&LidarSpec>) -> Result<(LidarSweep, LidarSpec)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = parse_ply(&bytes)?;
    let side = sidecar(path);
    if side.exists() {
        let meta: SweepSidecar = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
        let sweep = LidarSweep::new(points, meta.ray_ids, meta.spec.ray_count())?;
        return Ok((sweep, meta.spec));
    }
    let spec = fallback.ok_or_else(|| Error::format("ply", "no ray-id sidecar and no sensor spec given"))?;
    Ok((LidarSweep::from_points(&points, spec), spec.clone()))
}
