//! Wavefront OBJ (positions and faces) with a JSON sidecar for the per-face
//! texture atlas.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TexturedMesh;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureAtlasFile {
    /// `[M, C, C, 3]`
    pub shape: [usize; 4],
    pub texels: Vec<f64>,
}

fn sidecar(obj: &Path) -> PathBuf {
    obj.with_extension("texture.json")
}

pub fn obj_string(mesh: &TexturedMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        // {:?} round-trips f64 exactly
        let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Writes `path` (OBJ) and `path.texture.json`.
pub fn write_mesh(mesh: &TexturedMesh, path: &Path) -> Result<()> {
    fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))?;
    let c = mesh.texture_res();
    let atlas = TextureAtlasFile { shape: [mesh.faces().len(), c, c, 3], texels: mesh.textures().to_vec() };
    let side = sidecar(path);
    fs::write(&side, serde_json::to_string(&atlas)?).map_err(|e| Error::io(side, e))
}

fn parse_obj(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format("obj", format!("line {}: {e}", ln + 1)))?;
                if c.len() != 3 {
                    return Err(Error::format("obj", format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format("obj", format!("line {}: {e}", ln + 1)))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(Error::format("obj", format!("line {}: only 1-based triangles supported", ln + 1)));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub fn read_mesh(path: &Path) -> Result<TexturedMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (vertices, faces) = parse_obj(&text)?;
    let side = sidecar(path);
    let atlas: TextureAtlasFile =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let [m, c, c2, ch] = atlas.shape;
    if m != faces.len() || c != c2 || ch != 3 {
        return Err(Error::format("texture atlas", format!("shape {:?} for {} faces", atlas.shape, faces.len())));
    }
    TexturedMesh::new(vertices, faces, c, atlas.texels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_icosphere;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adv.obj");
        let mut m = make_icosphere(1, 2);
        let v = m.vertices().iter().map(|v| [v[0] * 0.3137, v[1] / 7.0, v[2] + 1e-9]).collect();
        m = m.with_vertices(v).unwrap();
        let t: Vec<f64> = (0..m.textures().len()).map(|i| (i as f64 * 0.618).fract()).collect();
        m = m.with_textures(t).unwrap();
        write_mesh(&m, &p).unwrap();
        assert_eq!(read_mesh(&p).unwrap(), m);
    }

    #[test]
    fn rejects_quads() {
        assert!(parse_obj("v 0 0 0\nf 1 2 3 4\n").is_err());
    }
}
