use serde::{Deserialize, Serialize};

use super::{Backward, Value};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, dilation: 1 }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Calls `f(column_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let Geometry { cin, h, w, kh, kw, ho, wo, spec } = *self;
        let hw_out = ho * wo;
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix =
                                (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(row * hw_out + oy * wo + ox, (c * h + iy as usize) * w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * self.ho * self.wo];
        self.for_each_tap(|ci, ii| cols[ci] = input[ii]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut img = vec![0.0; self.cin * self.h * self.w];
        self.for_each_tap(|ci, ii| img[ii] += cols[ci]);
        img
    }
}

struct Conv2d {
    geo: Geometry,
    cout: usize,
}

impl Backward for Conv2d {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let geo = self.geo;
        let (x, w) = (inputs[0], inputs[1]);
        let kk = geo.cin * geo.kh * geo.kw;
        let n = geo.ho * geo.wo;
        let g = grad.data();
        let mut out = Vec::with_capacity(inputs.len());
        out.push(needs[0].then(|| {
            let mut cols = vec![0.0; kk * n];
            gemm(kk, self.cout, n, w.data(), true, g, false, 0.0, &mut cols);
            Tensor::from_parts(x.shape().to_vec(), geo.col2im(&cols))
        }));
        out.push(needs[1].then(|| {
            let cols = geo.im2col(x.data());
            let mut gw = vec![0.0; self.cout * kk];
            gemm(self.cout, n, kk, g, false, &cols, true, 0.0, &mut gw);
            Tensor::from_parts(w.shape().to_vec(), gw)
        }));
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let gb = g.chunks(n).map(|r| r.iter().sum()).collect();
                Tensor::from_parts(vec![self.cout], gb)
            }));
        }
        out
    }
}

impl<'g> Value<'g> {
    /// 2-D convolution of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
    /// weights and optional `[C_out]` bias.
    pub fn conv2d(self, weight: Value<'g>, bias: Option<Value<'g>>, spec: ConvSpec) -> Result<Value<'g>> {
        let (x, w) = (self.tensor(), weight.tensor());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}, {spec:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (Some(ho), Some(wo)) = (spec.output_size(h, kh), spec.output_size(wd, kw)) else {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than input {xs:?}")));
        };
        let b = bias.map(|b| b.tensor());
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let geo = Geometry { cin, h, w: wd, kh, kw, ho, wo, spec };
        let cols = geo.im2col(x.data());
        let n = ho * wo;
        let mut out = vec![0.0; cout * n];
        if let Some(b) = &b {
            for (row, &bv) in out.chunks_mut(n).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm(cout, cin * kh * kw, n, w.data(), false, &cols, false, 1.0, &mut out);
        let out = Tensor::from_parts(vec![cout, ho, wo], out);
        let op = Conv2d { geo, cout };
        Ok(match bias {
            Some(b) => self.graph.record(&[self, weight, b], out, op),
            None => self.graph.record(&[self, weight], out, op),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    /// Direct nested-loop convolution used as an independent reference.
    fn naive(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Vec<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = spec.output_size(h, kh).unwrap();
        let wo = spec.output_size(wd, kw).unwrap();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn matches_naive_for_strides_and_dilations() {
        for spec in [
            ConvSpec::same(3),
            ConvSpec { stride: 2, padding: 1, dilation: 1 },
            ConvSpec { stride: 1, padding: 2, dilation: 2 },
        ] {
            let x = ramp(&[2, 7, 9], 0.7);
            let w = ramp(&[3, 2, 3, 3], 1.3);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, spec).unwrap();
            let expect = naive(&x, &w, spec);
            for (a, b) in y.tensor().data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_size() {
        let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
        assert_eq!(spec.output_size(64, 3), Some(32));
        assert_eq!(spec.output_size(192, 3), Some(96));
    }
}
