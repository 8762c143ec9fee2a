//! Reverse-mode differentiation over a linear operation record.
//!
//! Every forward operation appends a node holding its value and the
//! operands needed to propagate gradients. [`Tape::backward`] walks the
//! record in reverse, so gradient evaluation order is fixed by the order in
//! which the forward pass was written and is therefore deterministic.

use crate::error::{shape_err, Error, Result};
use crate::numeric::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    /// Derivative is taken as 0 where the output is 0.
    Sqrt,
    Softplus,
    Exp,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.max(0.0).sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddScalarVar(Var, Var),
    MulScalarVar(Var, Var),
    AddBias(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    DownAvg(Var, usize),
    UpNearest(Var, usize),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, xhat: Vec<f64>, inv_std: Vec<f64>, beta: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, indices: Vec<usize> },
    StraightThrough { encoder: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record plus the values computed by the forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer, or `None` if no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled if nothing reached `v`.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("expected a matrix, got shape {s:?}")),
    }
}

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => shape_err(format!("expected H×W×C, got shape {s:?}")),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Direct 2-D convolution on H×W×Cin input with a k×k×Cin×Cout kernel,
/// zero padding.
pub(crate) fn conv2d_forward(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    kern: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let inp = &x[base..base + cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &kern[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += a * kv;
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(t, Op::AddConst(a), ng)
    }

    fn scalar_of(&self, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return shape_err(format!("expected a scalar, got shape {:?}", t.shape()));
        }
        Ok(t.item())
    }

    /// `x + s` with `s` a single-element tensor.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        let t = self.value(x).map(|v| v + c);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::AddScalarVar(x, s), ng))
    }

    /// `x * s` with `s` a single-element tensor.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        let t = self.value(x).map(|v| v * c);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::MulScalarVar(x, s), ng))
    }

    /// Adds a length-C vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().expect("non-empty shape");
        if tb.len() != c {
            return shape_err(format!("bias of length {} for last axis {c}", tb.len()));
        }
        let bd = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let t = self.value(x).map(|v| f.forward(v));
        let ng = self.needs(x);
        self.push(t, Op::Unary(x, f), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a))?;
        let (k2, m) = rows_cols(self.value(b))?;
        if k != k2 {
            return shape_err(format!("matmul inner extents {k} vs {k2}"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.value(a))?;
        let t = Tensor::new(&[m, n], transpose_data(self.value(a).data(), n, m))?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    /// 2-D convolution, zero padded. `input` is H×W×Cin, `kernel` is k×k×Cin×Cout.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = hwc(self.value(input))?;
        let (k, cout) = match self.value(kernel).shape() {
            [k1, k2, ci, co] if k1 == k2 => {
                if *ci != cin {
                    return shape_err(format!("kernel expects {ci} input channels, input has {cin}"));
                }
                (*k1, *co)
            }
            s => return shape_err(format!("expected k×k×Cin×Cout kernel, got {s:?}")),
        };
        if stride == 0 {
            return Err(Error::Argument("stride must be at least 1".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return shape_err(format!("kernel {k} larger than padded input {h}×{w} (pad {pad})"));
        }
        let (out, ho, wo) = conv2d_forward(
            self.value(input).data(),
            (h, w, cin),
            self.value(kernel).data(),
            k,
            cout,
            stride,
            pad,
        );
        let t = Tensor::new(&[ho, wo, cout], out)?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, stride, pad }, ng))
    }

    /// r×r block average.
    pub fn downsample_avg(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.value(x))?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Argument(format!("extents {h}×{w} not divisible by {r}")));
        }
        let (ho, wo) = (h / r, w / r);
        let xd = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        let inv = 1.0 / (r * r) as f64;
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / r) * wo + xx / r) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += xd[i + ch] * inv;
                }
            }
        }
        let t = Tensor::new(&[ho, wo, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::DownAvg(x, r), ng))
    }

    /// Nearest-neighbour replication by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.value(x))?;
        if r == 0 {
            return Err(Error::Argument("upsampling factor must be at least 1".into()));
        }
        let (ho, wo) = (h * r, w * r);
        let xd = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                let i = ((y / r) * w + xx / r) * c;
                let o = (y * wo + xx) * c;
                out[o..o + c].copy_from_slice(&xd[i..i + c]);
            }
        }
        let t = Tensor::new(&[ho, wo, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::UpNearest(x, r), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.value(x))?;
        let t = Tensor::new(&[n, m], softmax_data(self.value(x).data(), m))?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SoftmaxRows(x), ng))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = rows_cols(self.value(logits))?;
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Index { index: bad, extent: m });
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (row, &t) in ld.chunks(m).zip(targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let t = Tensor::scalar(total / n as f64);
        let ng = self.needs(logits);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec() }, ng))
    }

    /// Row-wise layer normalization of an n×d matrix with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return shape_err(format!("layer norm parameters must have length {d}"));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.needs(x);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(t, Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Columns `start..start + len` of an n×d matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x))?;
        if start + len > d || len == 0 {
            return shape_err(format!("column slice {start}..{} of width {d}", start + len));
        }
        let xd = self.value(x).data();
        let data = (0..n).flat_map(|i| xd[i * d + start..i * d + start + len].iter().copied()).collect();
        let t = Tensor::new(&[n, len], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = rows_cols(self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.value(p))?;
            if r != n {
                return shape_err(format!("concat row mismatch {r} vs {n}"));
            }
            widths.push(c);
        }
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(&[n, d], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows of an N×d table selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = rows_cols(self.value(table))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, extent: rows });
        }
        let td = self.value(table).data();
        let data = indices.iter().flat_map(|&i| td[i * d..(i + 1) * d].iter().copied()).collect();
        let t = Tensor::new(&[indices.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(t, Op::GatherRows { table, indices: indices.to_vec() }, ng))
    }

    /// Forward value of `quantized`, backward identity into `encoder`.
    /// `quantized` receives no gradient along this path.
    pub fn straight_through(&mut self, encoder: Var, quantized: Var) -> Result<Var> {
        same_shape(self.value(encoder), self.value(quantized))?;
        let t = self.value(quantized).clone();
        let ng = self.needs(encoder);
        Ok(self.push(t, Op::StraightThrough { encoder }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value
    /// that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::AddScalarVar(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().sum::<f64>();
                }
            }
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += c * y);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (((a, &gy), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(yv) {
                        *a += gy * f.derivative(xi, yi);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = rows_cols(self.value(*a)).expect("matrix");
                let m = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            for (x, &gy) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *x += av_ip * gy;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (n, m) = rows_cols(self.value(*a)).expect("matrix");
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &transpose_data(g, m, n));
                }
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                self.conv2d_backward(*input, *kernel, *stride, *pad, node.value.shape(), g, grads)
            }
            Op::DownAvg(x, r) => {
                let (h, w, c) = hwc(self.value(*x)).expect("hwc");
                let wo = w / r;
                let inv = 1.0 / (r * r) as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = ((y / r) * wo + xx / r) * c;
                            let ii = (y * w + xx) * c;
                            for ch in 0..c {
                                gx[ii + ch] += g[o + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::UpNearest(x, r) => {
                let (_, w, c) = hwc(self.value(*x)).expect("hwc");
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let ii = ((y / r) * w + xx / r) * c;
                            let o = (y * wo + xx) * c;
                            for ch in 0..c {
                                gx[ii + ch] += g[o + ch];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.shape()[1];
                let yv = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(m).zip(yv.chunks(m)).zip(gx.chunks_mut(m)) {
                        let s = dot(gr, yr);
                        for j in 0..m {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let m = self.value(*logits).shape()[1];
                let n = targets.len();
                let probs = softmax_data(self.value(*logits).data(), m);
                let scale = g[0] / n as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * m + j] += scale * (probs[r * m + j] - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).len();
                let gd = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxh, xr) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * d + start..r * d + start + len], gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let d = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, gr) in gp.chunks_mut(c).enumerate() {
                            add_into(gr, &g[r * d + off..r * d + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows { table, indices } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut gt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::StraightThrough { encoder } => {
                if let Some(ge) = self.acc(grads, *encoder) {
                    add_into(ge, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (h, w, cin) = hwc(self.value(input)).expect("hwc");
        let ks = self.value(kernel).shape();
        let (k, cout) = (ks[0], ks[3]);
        let (ho, wo) = (out_shape[0], out_shape[1]);
        let xv = self.value(input).data();
        let kv = self.value(kernel).data();
        let need_x = self.needs(input);
        let need_k = self.needs(kernel);
        let mut gx = need_x.then(|| vec![0.0; xv.len()]);
        let mut gk = need_k.then(|| vec![0.0; kv.len()]);
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * cin;
                        let kbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if let Some(gx) = gx.as_mut() {
                                gx[base + ci] += dot(go, &kv[krange.clone()]);
                            }
                            if let Some(gk) = gk.as_mut() {
                                let a = xv[base + ci];
                                if a != 0.0 {
                                    for (x, &gy) in gk[krange].iter_mut().zip(go) {
                                        *x += a * gy;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let (Some(gx), Some(acc)) = (gx, self.acc(grads, input)) {
            add_into(acc, &gx);
        }
        if let (Some(gk), Some(acc)) = (gk, self.acc(grads, kernel)) {
            add_into(acc, &gk);
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose_data(d: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    out
}

pub(crate) fn softmax_data(d: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.len());
    for row in d.chunks(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}
