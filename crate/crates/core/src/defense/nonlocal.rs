//! Embedded-Gaussian non-local block: softmax attention over all spatial
//! positions with a residual output projection.

use crate::autodiff::{ConvSpec, Value};
use crate::detector::BoundParams;
use crate::error::{Error, Result};

const POINTWISE: ConvSpec = ConvSpec { stride: 1, padding: 0, dilation: 1 };

/// `(weight, bias)` pairs of the four 1x1 projections.
pub struct NonLocalParams<'g> {
    pub theta: (Value<'g>, Value<'g>),
    pub phi: (Value<'g>, Value<'g>),
    pub g: (Value<'g>, Value<'g>),
    pub out: (Value<'g>, Value<'g>),
}

impl<'g> NonLocalParams<'g> {
    pub fn from_bound(p: &BoundParams<'g>, prefix: &str) -> Result<Self> {
        let pair = |n: &str| -> Result<(Value<'g>, Value<'g>)> {
            Ok((p.get(&format!("{prefix}.{n}.w"))?, p.get(&format!("{prefix}.{n}.b"))?))
        };
        Ok(NonLocalParams { theta: pair("theta")?, phi: pair("phi")?, g: pair("g")?, out: pair("out")? })
    }
}

/// `x + W_out(softmax(theta(x)^T phi(x)) applied to g(x))` on `[C, H, W]`.
pub fn nonlocal_forward<'g>(x: Value<'g>, p: &NonLocalParams<'g>) -> Result<Value<'g>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("nonlocal_block", format!("features {s:?}")));
    }
    let n = s[1] * s[2];
    let proj = |w: &(Value<'g>, Value<'g>)| -> Result<Value<'g>> {
        let y = x.conv2d(w.0, Some(w.1), POINTWISE)?;
        let c = y.shape()[0];
        y.reshape(&[c, n])
    };
    let theta = proj(&p.theta)?;
    let phi = proj(&p.phi)?;
    let g = proj(&p.g)?;
    let c_inner = g.shape()[0];
    let attn = theta.transpose()?.matmul(phi)?.softmax();
    let y = g.matmul(attn.transpose()?)?.reshape(&[c_inner, s[1], s[2]])?;
    x.add(y.conv2d(p.out.0, Some(p.out.1), POINTWISE)?)
}

/// Non-local block whose weights are named `{prefix}.{theta,phi,g,out}.{w,b}`.
pub fn nonlocal_block<'g>(x: Value<'g>, params: &BoundParams<'g>, prefix: &str) -> Result<Value<'g>> {
    nonlocal_forward(x, &NonLocalParams::from_bound(params, prefix)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Graph};
    use crate::tensor::Tensor;

    fn params<'g>(g: &'g Graph, c: usize, ci: usize, out_scale: f64) -> NonLocalParams<'g> {
        let w = |co: usize, cin: usize, s: f64, seed: f64| {
            g.constant(Tensor::new(&[co, cin, 1, 1], (0..co * cin).map(|i| s * ((i as f64 + seed) * 1.3).sin()).collect()).unwrap())
        };
        let b = |co: usize, s: f64| g.constant(Tensor::new(&[co], (0..co).map(|i| s * (i as f64 * 0.7).cos()).collect()).unwrap());
        NonLocalParams {
            theta: (w(ci, c, 0.5, 0.1), b(ci, 0.1)),
            phi: (w(ci, c, 0.5, 0.7), b(ci, 0.1)),
            g: (w(ci, c, 0.5, 1.9), b(ci, 0.1)),
            out: (w(c, ci, out_scale, 2.3), b(c, out_scale)),
        }
    }

    fn input(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap()
    }

    #[test]
    fn zero_projection_is_identity() {
        let g = Graph::new();
        let x = g.constant(input(4, 3, 5));
        let y = nonlocal_forward(x, &params(&g, 4, 2, 0.0)).unwrap();
        assert_eq!(*y.tensor(), *x.tensor());
    }

    #[test]
    fn constant_input_gives_uniform_attention() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 3], 0.3));
        let p = params(&g, 4, 2, 1.0);
        let theta = x.conv2d(p.theta.0, Some(p.theta.1), POINTWISE).unwrap().reshape(&[2, 6]).unwrap();
        let phi = x.conv2d(p.phi.0, Some(p.phi.1), POINTWISE).unwrap().reshape(&[2, 6]).unwrap();
        let attn = theta.transpose().unwrap().matmul(phi).unwrap().softmax();
        assert!(attn.tensor().data().iter().all(|a| (a - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn permutation_equivariant() {
        let g = Graph::new();
        let p = params(&g, 3, 2, 1.0);
        let x = input(3, 1, 6);
        let perm = [4, 2, 0, 5, 1, 3];
        let permute = |t: &Tensor| {
            let mut out = t.data().to_vec();
            for c in 0..3 {
                for (i, &j) in perm.iter().enumerate() {
                    out[c * 6 + i] = t.data()[c * 6 + j];
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let y = nonlocal_forward(g.constant(x.clone()), &p).unwrap();
        let yp = nonlocal_forward(g.constant(permute(&x)), &p).unwrap();
        let expect = permute(&y.tensor());
        for (a, b) in yp.tensor().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = input(4, 2, 3);
        let r = grad_check(
            |g, v| {
                let y = nonlocal_forward(v, &params(g, 4, 2, 0.8))?;
                let w = g.constant(Tensor::new(&[4, 2, 3], (0..24).map(|i| (i as f64 * 0.41).cos()).collect())?);
                Ok(y.mul(w)?.sum())
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
