//! Textured triangle meshes: the adversary representation, its
//! initialization, smoothness regularizer, box projection and placement.

mod icosphere;
mod io;
mod laplacian;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use icosphere::make_icosphere;
pub use io::{read_mesh, write_mesh, TextureAtlasFile};
pub use laplacian::{laplacian_loss, Laplacian};

pub type Vec3 = [f64; 3];

/// `M = (V, F, T)`: `N` vertices in meters (object frame), `M` faces and a
/// `C x C` RGB texel grid per face.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturedMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    texture_res: usize,
    /// Row-major `[M, C, C, 3]`.
    textures: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl TexturedMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, texture_res: usize, textures: Vec<f64>) -> Result<Self> {
        if texture_res == 0 {
            return Err(Error::invalid("texture resolution must be positive"));
        }
        if faces.is_empty() {
            return Err(Error::invalid("mesh has no faces"));
        }
        let n = vertices.len();
        if let Some((fi, f)) = faces.iter().enumerate().find(|(_, f)| f.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("face {fi} {f:?} indexes past {n} vertices")));
        }
        let expect = faces.len() * texture_res * texture_res * 3;
        if textures.len() != expect {
            return Err(Error::invalid(format!("texture atlas has {} texels, expected {expect}", textures.len())));
        }
        if textures.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("texel outside [0, 1]"));
        }
        let mut edge_use: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for f in &faces {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {f:?} repeats a vertex")));
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, c)) = edge_use.iter().find(|(_, &c)| c > 2) {
            return Err(Error::invalid(format!("edge {e:?} shared by {c} faces; mesh is not edge-manifold")));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edge_use.keys() {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Ok(TexturedMesh { vertices, faces, texture_res, textures, neighbors })
    }

    /// Same topology and textures, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(TexturedMesh { vertices, ..self.clone() })
    }

    pub fn with_textures(&self, textures: Vec<f64>) -> Result<Self> {
        if textures.len() != self.textures.len() {
            return Err(Error::invalid("texture atlas size changed"));
        }
        if textures.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("texel outside [0, 1]"));
        }
        Ok(TexturedMesh { textures, ..self.clone() })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn texture_res(&self) -> usize {
        self.texture_res
    }

    pub fn textures(&self) -> &[f64] {
        &self.textures
    }

    /// 1-ring neighborhoods, fixed at construction.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn vertex_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.vertices.len(), 3], self.vertices.iter().flatten().copied().collect())
    }

    pub fn texture_tensor(&self) -> Tensor {
        let c = self.texture_res;
        Tensor::from_parts(vec![self.faces.len(), c, c, 3], self.textures.clone())
    }

    pub fn from_vertex_tensor(&self, v: &Tensor) -> Result<Self> {
        if v.shape() != [self.vertices.len(), 3] {
            return Err(Error::shape("mesh vertices", format!("{:?}", v.shape())));
        }
        self.with_vertices(v.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Per-axis `max |v_j|`.
    pub fn linf_extent(&self) -> Vec3 {
        let mut m = [0.0_f64; 3];
        for v in &self.vertices {
            for j in 0..3 {
                m[j] = m[j].max(v[j].abs());
            }
        }
        m
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for j in 0..3 {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vec3,
    pub heading: f64,
}

impl Pose {
    pub fn new(translation: Vec3, heading: f64) -> Self {
        Pose { translation, heading: normalize_angle(heading) }
    }

    pub fn identity() -> Self {
        Pose { translation: [0.0; 3], heading: 0.0 }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.heading.sin_cos();
        let t = self.translation;
        Pose::new([-(c * t[0] + s * t[1]), s * t[0] - c * t[1], -t[2]], -self.heading)
    }

    /// Row-major rotation about +z.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.heading.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl BoxConstraint {
    pub fn new(lx: f64, ly: f64, lz: f64) -> Result<Self> {
        if !(lx > 0.0 && ly > 0.0 && lz > 0.0) {
            return Err(Error::invalid(format!("box constraint must be positive, got ({lx}, {ly}, {lz})")));
        }
        Ok(BoxConstraint { lx, ly, lz })
    }

    pub fn cube(l: f64) -> Result<Self> {
        Self::new(l, l, l)
    }

    pub fn limits(&self) -> Vec3 {
        [self.lx, self.ly, self.lz]
    }

    pub fn contains(&self, mesh: &TexturedMesh) -> bool {
        let e = mesh.linf_extent();
        let l = self.limits();
        (0..3).all(|j| e[j] <= l[j])
    }
}

impl Default for BoxConstraint {
    fn default() -> Self {
        BoxConstraint { lx: 0.8, ly: 0.8, lz: 0.5 }
    }
}

/// Projection onto the feasible set: vertices into `[-L_j, L_j]`, texels
/// into `[0, 1]`.
pub fn clamp_vertices(mesh: &TexturedMesh, bounds: &BoxConstraint) -> TexturedMesh {
    let l = bounds.limits();
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| [v[0].clamp(-l[0], l[0]), v[1].clamp(-l[1], l[1]), v[2].clamp(-l[2], l[2])])
        .collect();
    let textures = mesh.textures.iter().map(|t| t.clamp(0.0, 1.0)).collect();
    TexturedMesh { vertices, textures, ..mesh.clone() }
}

pub fn clamp_texels(texels: &mut [f64]) {
    for t in texels {
        *t = t.clamp(0.0, 1.0);
    }
}

pub fn transform_mesh(mesh: &TexturedMesh, pose: &Pose) -> TexturedMesh {
    let vertices = mesh.vertices.iter().map(|&v| pose.apply(v)).collect();
    TexturedMesh { vertices, ..mesh.clone() }
}

/// Differentiable placement of an `[N, 3]` vertex value.
pub fn transform_vertices<'g>(v: Value<'g>, pose: &Pose) -> Result<Value<'g>> {
    let g = v.graph();
    let r = pose.rotation();
    // v · R^T
    let rt = Tensor::from_parts(vec![3, 3], (0..9).map(|i| r[i % 3][i / 3]).collect());
    let rotated = v.matmul(g.constant(rt))?;
    rotated.add(g.constant(Tensor::from_vec(pose.translation.to_vec())))
}

pub fn face_normal(a: Vec3, b: Vec3, c: Vec3) -> Option<Vec3> {
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    (len > 1e-15).then(|| [n[0] / len, n[1] / len, n[2] / len])
}

/// Unit normals by the right-hand rule on `(v1 - v0) x (v2 - v0)`.
pub fn face_normals(mesh: &TexturedMesh) -> Result<Vec<Vec3>> {
    mesh.faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            face_normal(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]])
                .ok_or_else(|| Error::invalid(format!("face {i} has zero area")))
        })
        .collect()
}

/// Axis-aligned box centered at the origin in x/y with its base on z = 0,
/// outward-wound. Face order: bottom(2), top(2), +x(2), -x(2), +y(2), -y(2).
pub fn box_geometry(length: f64, width: f64, height: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let (hx, hy) = (length / 2.0, width / 2.0);
    let v = vec![
        [-hx, -hy, 0.0],
        [hx, -hy, 0.0],
        [hx, hy, 0.0],
        [-hx, hy, 0.0],
        [-hx, -hy, height],
        [hx, -hy, height],
        [hx, hy, height],
        [-hx, hy, height],
    ];
    let f = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [1, 2, 6],
        [1, 6, 5],
        [0, 4, 7],
        [0, 7, 3],
        [3, 7, 6],
        [3, 6, 2],
        [0, 1, 5],
        [0, 5, 4],
    ];
    (v, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamp_examples() {
        let m = TexturedMesh::new(
            vec![[1.0, 0.0, 0.6], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]],
            vec![[0, 1, 2]],
            1,
            vec![0.5, 0.5, 0.5],
        )
        .unwrap();
        let b = BoxConstraint::default();
        let c = clamp_vertices(&m, &b);
        assert_eq!(c.vertices()[0], [0.8, 0.0, 0.5]);
        let c2 = clamp_vertices(&c, &b);
        assert_eq!(c, c2);
        let mut t = vec![1.3, -0.2, 0.4];
        clamp_texels(&mut t);
        assert_eq!(t, vec![1.0, 0.0, 0.4]);
    }

    #[test]
    fn transform_examples() {
        let m = make_icosphere(1, 1);
        assert_eq!(transform_mesh(&m, &Pose::identity()), m);
        let p = Pose::new([0.0; 3], PI);
        let v = p.apply([1.0, 0.0, 0.0]);
        assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        let pose = Pose::new([3.0, -2.0, 1.5], 0.7);
        let back = transform_mesh(&transform_mesh(&m, &pose), &pose.inverse());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            for j in 0..3 {
                assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn differentiable_transform_matches_pose() {
        let g = crate::autodiff::Graph::new();
        let m = make_icosphere(0, 1);
        let pose = Pose::new([1.0, 2.0, 3.0], -1.1);
        let v = transform_vertices(g.constant(m.vertex_tensor()), &pose).unwrap();
        let expect = transform_mesh(&m, &pose).vertex_tensor();
        for (a, b) in v.tensor().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn normals_examples() {
        let n = face_normal([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(n, [0.0, 0.0, 1.0]);
        let r = face_normal([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, [0.0, 0.0, -1.0]);
        let m = TexturedMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2]],
            1,
            vec![0.5; 3],
        )
        .unwrap();
        assert!(face_normals(&m).unwrap_err().to_string().contains("face 0"));
        for n in face_normals(&make_icosphere(2, 1)).unwrap() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_is_closed_and_outward() {
        let (v, f) = box_geometry(4.0, 2.0, 1.5);
        let m = TexturedMesh::new(v, f, 1, vec![0.5; 36]).unwrap();
        assert_eq!(m.vertices().len() + m.faces().len(), m.edge_count() + 2);
        let center = [0.0, 0.0, 0.75];
        for (n, f) in face_normals(&m).unwrap().iter().zip(m.faces()) {
            let p = m.vertices()[f[0]];
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            assert!(n[0] * d[0] + n[1] * d[1] + n[2] * d[2] > 0.0);
        }
    }

    #[test]
    fn rejects_bad_meshes() {
        assert!(TexturedMesh::new(vec![[0.0; 3]; 2], vec![[0, 1, 2]], 1, vec![0.5; 3]).is_err());
        assert!(TexturedMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 2]], 1, vec![1.5; 3]).is_err());
        // three faces on one edge
        let v = vec![[0.0; 3]; 5];
        let f = vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]];
        assert!(TexturedMesh::new(v, f, 1, vec![0.5; 9]).is_err());
    }

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent_and_shrinks_extent(
            coords in proptest::collection::vec(-2.0f64..2.0, 36),
            l in (0.1f64..1.0, 0.1f64..1.0, 0.1f64..1.0),
        ) {
            let m = make_icosphere(0, 1);
            let v = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let m = m.with_vertices(v).unwrap();
            let b = BoxConstraint::new(l.0, l.1, l.2).unwrap();
            let once = clamp_vertices(&m, &b);
            prop_assert_eq!(&clamp_vertices(&once, &b), &once);
            let (e0, e1) = (m.linf_extent(), once.linf_extent());
            for j in 0..3 {
                prop_assert!(e1[j] <= e0[j]);
            }
            prop_assert!(b.contains(&once));
        }
    }
}
