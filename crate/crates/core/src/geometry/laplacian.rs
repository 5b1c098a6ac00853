use super::TexturedMesh;
use crate::autodiff::{Backward, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform mesh Laplacian over cached 1-ring neighborhoods.
#[derive(Clone, Debug)]
pub struct Laplacian {
    neighbors: Vec<Vec<usize>>,
}

impl Laplacian {
    pub fn new(mesh: &TexturedMesh) -> Result<Self> {
        if let Some(i) = mesh.neighbors().iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("vertex {i} is isolated; Laplacian undefined")));
        }
        Ok(Laplacian { neighbors: mesh.neighbors().to_vec() })
    }

    /// `delta_i = v_i - mean(v_j for j in N(i))`.
    pub fn deltas(&self, v: &[f64]) -> Vec<f64> {
        let mut d = v.to_vec();
        for (i, nb) in self.neighbors.iter().enumerate() {
            let w = 1.0 / nb.len() as f64;
            for &j in nb {
                for c in 0..3 {
                    d[3 * i + c] -= w * v[3 * j + c];
                }
            }
        }
        d
    }

    /// `sum_i |delta_i|^2` for an `[N, 3]` vertex value.
    pub fn loss<'g>(&self, v: Value<'g>) -> Result<Value<'g>> {
        let t = v.tensor();
        if t.shape() != [self.neighbors.len(), 3] {
            return Err(Error::shape(
                "laplacian_loss",
                format!("vertices {:?} for {} neighborhoods", t.shape(), self.neighbors.len()),
            ));
        }
        let d = self.deltas(t.data());
        let loss = d.iter().map(|x| x * x).sum();
        Ok(v.graph().record(&[v], Tensor::scalar(loss), LaplacianBackward { lap: self.clone(), deltas: d }))
    }
}

struct LaplacianBackward {
    lap: Laplacian,
    deltas: Vec<f64>,
}

impl Backward for LaplacianBackward {
    // d/dv = 2 (I - A)^T delta
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = 2.0 * grad.item();
        let mut g: Vec<f64> = self.deltas.iter().map(|d| s * d).collect();
        for (i, nb) in self.lap.neighbors.iter().enumerate() {
            let w = s / nb.len() as f64;
            for &j in nb {
                for c in 0..3 {
                    g[3 * j + c] -= w * self.deltas[3 * i + c];
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g))]
    }
}

/// Laplacian smoothness loss of `mesh` as a differentiable scalar over the
/// given vertex value.
pub fn laplacian_loss<'g>(mesh: &TexturedMesh, vertices: Value<'g>) -> Result<Value<'g>> {
    Laplacian::new(mesh)?.loss(vertices)
}
