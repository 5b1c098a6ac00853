use super::{Backward, ConvSpec, Graph, Value};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Primitive operation selector for [`Graph::forward_primitive`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    Matmul,
    Conv2d(ConvSpec),
    Relu,
    Sigmoid,
    Softmax,
    Log,
    Sum,
    Max,
    Clamp { lo: f64, hi: f64 },
    Gather(Vec<usize>),
    ScatterAdd { indices: Vec<usize>, rows: usize },
    BilinearSample,
}

impl Graph {
    /// Applies a primitive by kind. Binary kinds take two inputs, `Conv2d`
    /// takes `[input, weight]` or `[input, weight, bias]`, everything else one.
    pub fn forward_primitive<'g>(&'g self, kind: &OpKind, inputs: &[Value<'g>]) -> Result<Value<'g>> {
        let arity = match kind {
            OpKind::Add | OpKind::Mul | OpKind::Matmul | OpKind::BilinearSample => 2..=2,
            OpKind::Conv2d(_) => 2..=3,
            _ => 1..=1,
        };
        if !arity.contains(&inputs.len()) {
            return Err(Error::shape(
                "forward_primitive",
                format!("{kind:?} expects {arity:?} inputs, got {}", inputs.len()),
            ));
        }
        let x = inputs[0];
        match kind {
            OpKind::Add => x.add(inputs[1]),
            OpKind::Mul => x.mul(inputs[1]),
            OpKind::Matmul => x.matmul(inputs[1]),
            OpKind::Conv2d(spec) => x.conv2d(inputs[1], inputs.get(2).copied(), *spec),
            OpKind::Relu => Ok(x.relu()),
            OpKind::Sigmoid => Ok(x.sigmoid()),
            OpKind::Softmax => Ok(x.softmax()),
            OpKind::Log => Ok(x.log()),
            OpKind::Sum => Ok(x.sum()),
            OpKind::Max => Ok(x.max()),
            OpKind::Clamp { lo, hi } => Ok(x.clamp(*lo, *hi)),
            OpKind::Gather(idx) => x.gather(idx),
            OpKind::ScatterAdd { indices, rows } => x.scatter_add_rows(indices, *rows),
            OpKind::BilinearSample => x.bilinear_sample(inputs[1]),
        }
    }
}

// ---------------------------------------------------------------------------
// broadcasting binary ops

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Either operand may be a scalar or a trailing-dimension suffix of the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Ok(a.to_vec())
    } else if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        Ok(b.to_vec())
    } else {
        let _ = (na, nb);
        Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
    }
}

struct Binary {
    kind: BinKind,
}

impl Backward for Binary {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (na, nb) = (a.numel(), b.numel());
        let g = grad.data();
        let mut ga = needs[0].then(|| vec![0.0; na]);
        let mut gb = needs[1].then(|| vec![0.0; nb]);
        let (ad, bd) = (a.data(), b.data());
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = (i % na, i % nb);
            let (x, y) = (ad[ia], bd[ib]);
            let (dx, dy) = match self.kind {
                BinKind::Add => (1.0, 1.0),
                BinKind::Sub => (1.0, -1.0),
                BinKind::Mul => (y, x),
                BinKind::Div => (1.0 / y, -x / (y * y)),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += gi * dx;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += gi * dy;
            }
        }
        vec![
            ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
        ]
    }
}

// ---------------------------------------------------------------------------
// unary elementwise ops

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Clamp(f64, f64),
}

impl UnaryKind {
    fn forward(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Scale(s) => s * x,
            UnaryKind::AddScalar(c) => x + c,
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Scale(s) => s,
            UnaryKind::AddScalar(_) => 1.0,
            // subgradient 0 at the kink
            UnaryKind::Relu => f64::from(u8::from(x > 0.0)),
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Clamp(lo, hi) => f64::from(u8::from(x >= lo && x <= hi)),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Unary(UnaryKind);

impl Backward for Unary {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumAll;

impl Backward for SumAll {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct MaxAll;

impl Backward for MaxAll {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let m = out.item();
        let hits: Vec<usize> =
            x.data().iter().enumerate().filter(|(_, &v)| v == m).map(|(i, _)| i).collect();
        let mut g = Tensor::zeros(x.shape());
        // ties are a kink: subgradient 0
        if hits.len() == 1 {
            g.data_mut()[hits[0]] = grad.item();
        }
        vec![Some(g)]
    }
}

/// Softmax over the last axis.
struct Softmax {
    row: usize,
}

impl Backward for Softmax {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut gx = vec![0.0; out.numel()];
        for ((y, g), dst) in out
            .data()
            .chunks(self.row)
            .zip(grad.data().chunks(self.row))
            .zip(gx.chunks_mut(self.row))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
                *d = yi * (gi - dot);
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
    }
}

// ---------------------------------------------------------------------------
// linear algebra and indexing

struct Matmul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for Matmul {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let Matmul { m, k, n } = *self;
        let ga = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm(m, n, k, grad.data(), false, b.data(), true, 0.0, &mut d);
            Tensor::from_parts(vec![m, k], d)
        });
        let gb = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm(k, m, n, a.data(), true, grad.data(), false, 0.0, &mut d);
            Tensor::from_parts(vec![k, n], d)
        });
        vec![ga, gb]
    }
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

struct Transpose {
    rows: usize,
    cols: usize,
}

impl Backward for Transpose {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = transpose_data(grad.data(), self.cols, self.rows);
        vec![Some(Tensor::from_parts(vec![self.rows, self.cols], d))]
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl Backward for Reshape {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(self.shape.clone(), grad.data().to_vec()))]
    }
}

struct Concat {
    sizes: Vec<usize>,
}

impl Backward for Concat {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        inputs
            .iter()
            .zip(&self.sizes)
            .zip(needs)
            .map(|((x, &n), &need)| {
                let slice = &grad.data()[offset..offset + n];
                offset += n;
                need.then(|| Tensor::from_parts(x.shape().to_vec(), slice.to_vec()))
            })
            .collect()
    }
}

/// Row gather along axis 0; `row` is the number of elements per row.
struct GatherRows {
    indices: Vec<usize>,
    row: usize,
}

impl Backward for GatherRows {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut g = vec![0.0; x.numel()];
        for (k, &i) in self.indices.iter().enumerate() {
            let src = &grad.data()[k * self.row..(k + 1) * self.row];
            for (d, s) in g[i * self.row..(i + 1) * self.row].iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), g))]
    }
}

struct ScatterAddRows {
    indices: Vec<usize>,
    row: usize,
}

impl Backward for ScatterAddRows {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut g = Vec::with_capacity(x.numel());
        for &i in &self.indices {
            g.extend_from_slice(&grad.data()[i * self.row..(i + 1) * self.row]);
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), g))]
    }
}

struct BilinearSample;

/// Corner taps `(flat spatial index or None, weight, d weight/dx, d weight/dy)`.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |xi: f64, yi: f64, wt: f64, dx: f64, dy: f64| {
        let inside = xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h;
        let idx = inside.then(|| yi as usize * w + xi as usize);
        (idx, wt, dx, dy)
    };
    [
        tap(x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        tap(x0 + 1.0, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        tap(x0, y0 + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        tap(x0 + 1.0, y0 + 1.0, fx * fy, fy, fx),
    ]
}

impl Backward for BilinearSample {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (feat, coords) = (inputs[0], inputs[1]);
        let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
        let hw = h * w;
        let k = coords.shape()[0];
        let mut gf = needs[0].then(|| vec![0.0; feat.numel()]);
        let mut gc = needs[1].then(|| vec![0.0; coords.numel()]);
        let fd = feat.data();
        for p in 0..k {
            let (x, y) = (coords.data()[2 * p], coords.data()[2 * p + 1]);
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let g = &grad.data()[p * c..(p + 1) * c];
            for (idx, wt, dwx, dwy) in bilinear_taps(x, y, h, w) {
                let Some(idx) = idx else { continue };
                for ch in 0..c {
                    if let Some(gf) = gf.as_mut() {
                        gf[ch * hw + idx] += wt * g[ch];
                    }
                    if let Some(gc) = gc.as_mut() {
                        let f = fd[ch * hw + idx];
                        gc[2 * p] += g[ch] * f * dwx;
                        gc[2 * p + 1] += g[ch] * f * dwy;
                    }
                }
            }
        }
        vec![
            gf.map(|d| Tensor::from_parts(feat.shape().to_vec(), d)),
            gc.map(|d| Tensor::from_parts(coords.shape().to_vec(), d)),
        ]
    }
}

// ---------------------------------------------------------------------------
// Value API

impl<'g> Value<'g> {
    fn binary(self, other: Value<'g>, kind: BinKind, name: &'static str) -> Result<Value<'g>> {
        let (a, b) = (self.tensor(), other.tensor());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let (na, nb) = (ad.len(), bd.len());
        let data = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        Ok(self.graph.record(&[self, other], Tensor::from_parts(shape, data), Binary { kind }))
    }

    pub fn add(self, other: Value<'g>) -> Result<Value<'g>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Value<'g>) -> Result<Value<'g>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Value<'g>) -> Result<Value<'g>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Value<'g>) -> Result<Value<'g>> {
        self.binary(other, BinKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Value<'g> {
        let out = self.tensor().map(|x| kind.forward(x));
        self.graph.record(&[self], out, Unary(kind))
    }

    pub fn neg(self) -> Value<'g> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, s: f64) -> Value<'g> {
        self.unary(UnaryKind::Scale(s))
    }

    pub fn add_scalar(self, c: f64) -> Value<'g> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn relu(self) -> Value<'g> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Value<'g> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Value<'g> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Value<'g> {
        self.unary(UnaryKind::Log)
    }

    pub fn square(self) -> Value<'g> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Value<'g> {
        self.unary(UnaryKind::Sqrt)
    }

    /// Gradient passes (1) inside `[lo, hi]` and is 0 outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Value<'g> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn sum(self) -> Value<'g> {
        let s = self.tensor().sum();
        self.graph.record(&[self], Tensor::scalar(s), SumAll)
    }

    pub fn mean(self) -> Value<'g> {
        let n = self.tensor().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn max(self) -> Value<'g> {
        let m = self.tensor().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.graph.record(&[self], Tensor::scalar(m), MaxAll)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Value<'g> {
        let t = self.tensor();
        let row = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(row) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in r.iter_mut() {
                *v /= z;
            }
        }
        self.graph.record(&[self], Tensor::from_parts(t.shape().to_vec(), out), Softmax { row })
    }

    pub fn matmul(self, other: Value<'g>) -> Result<Value<'g>> {
        let (a, b) = (self.tensor(), other.tensor());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        Ok(self.graph.record(&[self, other], Tensor::from_parts(vec![m, n], out), Matmul { m, k, n }))
    }

    pub fn transpose(self) -> Result<Value<'g>> {
        let t = self.tensor();
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = transpose_data(t.data(), rows, cols);
        Ok(self.graph.record(&[self], Tensor::from_parts(vec![cols, rows], d), Transpose { rows, cols }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Value<'g>> {
        let t = self.tensor();
        let out = t.reshape(shape)?;
        Ok(self.graph.record(&[self], out, Reshape { shape: t.shape().to_vec() }))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(parts: &[Value<'g>]) -> Result<Value<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let t = p.tensor();
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {tail:?}", t.shape())));
            }
            rows += t.shape()[0];
            sizes.push(t.numel());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(first.graph.record(parts, Tensor::from_parts(shape, data), Concat { sizes }))
    }

    /// Flat gather: output shape `[indices.len()]`.
    pub fn gather(self, indices: &[usize]) -> Result<Value<'g>> {
        let n = self.tensor().numel();
        self.reshape(&[n])?.gather_rows(indices)
    }

    /// Gathers rows along axis 0.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Value<'g>> {
        let t = self.tensor();
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::shape("gather", "cannot gather rows of a scalar"));
        }
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {s:?}")));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&s[1..]);
        Ok(self.graph.record(
            &[self],
            Tensor::from_parts(shape, data),
            GatherRows { indices: indices.to_vec(), row },
        ))
    }

    /// Adds row `k` of `self` into row `indices[k]` of a zero tensor with
    /// `rows` rows.
    pub fn scatter_add_rows(self, indices: &[usize], rows: usize) -> Result<Value<'g>> {
        let t = self.tensor();
        let s = t.shape();
        if s.is_empty() || s[0] != indices.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("{} indices for input {s:?}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add", format!("index {bad} >= {rows} rows")));
        }
        let row: usize = s[1..].iter().product();
        let mut data = vec![0.0; rows * row];
        for (k, &i) in indices.iter().enumerate() {
            for (d, v) in data[i * row..(i + 1) * row].iter_mut().zip(&t.data()[k * row..(k + 1) * row]) {
                *d += v;
            }
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&s[1..]);
        Ok(self.graph.record(
            &[self],
            Tensor::from_parts(shape, data),
            ScatterAddRows { indices: indices.to_vec(), row },
        ))
    }

    /// Samples a `[C, H, W]` map at `[K, 2]` pixel coordinates `(x = col,
    /// y = row)` with zero padding; output `[K, C]`. Non-finite coordinates
    /// sample zero.
    pub fn bilinear_sample(self, coords: Value<'g>) -> Result<Value<'g>> {
        let (feat, xy) = (self.tensor(), coords.tensor());
        let (fs, cs) = (feat.shape(), xy.shape());
        if fs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::shape("bilinear_sample", format!("feature {fs:?}, coords {cs:?}")));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let hw = h * w;
        let k = cs[0];
        let mut out = vec![0.0; k * c];
        for p in 0..k {
            let (x, y) = (xy.data()[2 * p], xy.data()[2 * p + 1]);
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            for (idx, wt, _, _) in bilinear_taps(x, y, h, w) {
                let Some(idx) = idx else { continue };
                for ch in 0..c {
                    out[p * c + ch] += wt * feat.data()[ch * hw + idx];
                }
            }
        }
        Ok(self.graph.record(&[self, coords], Tensor::from_parts(vec![k, c], out), BilinearSample))
    }
}
