use super::kernels;
use super::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool {
        input: usize,
    },
    Softmax(usize),
    LayerNorm {
        input: usize,
        inv: Vec<f64>,
    },
    Gelu(usize),
    Erf(usize),
    Erfc(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    Log(usize),
    Exp(usize),
    Reshape(usize),
    Transpose(usize),
    SliceRows {
        input: usize,
        start: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        prefix: usize,
        probs: Vec<f64>,
    },
    SumAll(usize),
    SumCols(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Embedding { .. } => "embedding",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Erf(..) => "erf",
            Op::Erfc(..) => "erfc",
            Op::Softplus(..) => "softplus",
            Op::ClampMin(..) => "clamp_min",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Attention { .. } => "attention",
            Op::SumAll(..) => "sum_all",
            Op::SumCols(..) => "sum_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unused variables.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that retains everything needed for [`backward`](Self::backward).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A forward-only tape; intermediate adjoint state is not kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn keep_state(&self, vars: &[Var]) -> bool {
        self.recording && self.rg(vars)
    }

    fn mismatch(&self, op: &'static str, expected: &[usize], actual: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    fn invalid(&self, op: &'static str, reason: impl Into<String>) -> AutodiffError {
        AutodiffError::InvalidArgument {
            node: self.nodes.len(),
            op,
            reason: reason.into(),
        }
    }

    fn matrix_dims(&self, op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        if t.shape().len() != 2 {
            return Err(self.invalid(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, k) = self.matrix_dims("matmul", ta)?;
        let (k2, m) = self.matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(self.mismatch("matmul", &[k, m], tb.shape()));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul(ta.data(), tb.data(), k, m, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a.0, b.0), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(self.mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let m = ta.cols();
        if tb.len() != m || ta.shape().is_empty() {
            return Err(self.mismatch(name, &[m], tb.shape()));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    /// `a[i, j] + b[j]`
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow(a.0, b.0))
    }

    /// `a[i, j] * b[j]`
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow(a.0, b.0))
    }

    // ---- unary ops --------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, op, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu(a.0))
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary(a, crate::special::erf, Op::Erf(a.0))
    }

    /// `1 - erf(x)`, accurate where `erf(x)` is close to 1.
    pub fn erfc(&mut self, a: Var) -> Result<Var> {
        self.unary(a, crate::special::erfc, Op::Erfc(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::softplus, Op::Softplus(a.0))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a.0, floor))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let m = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(m).zip(out.chunks_mut(m)) {
            kernels::softmax_row(x, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a.0), rg))
    }

    /// Normalizes each row (last dimension) to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let m = ta.cols();
        let mut out = vec![0.0; ta.len()];
        let mut inv = Vec::with_capacity(ta.rows());
        for (x, o) in ta.data().chunks(m).zip(out.chunks_mut(m)) {
            inv.push(kernels::layer_norm_row(x, o).1);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        if !self.keep_state(&[a]) {
            inv.clear();
        }
        Ok(self.push(t, Op::LayerNorm { input: a.0, inv }, rg))
    }

    // ---- structural ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.check(a)?;
        if shape.iter().product::<usize>() != ta.len() {
            return Err(self.mismatch("reshape", shape, ta.shape()));
        }
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let (n, m) = self.matrix_dims("transpose", ta)?;
        let src = ta.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a.0), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.check(a)?;
        let (n, m) = self.matrix_dims("slice_rows", ta)?;
        if start + len > n {
            return Err(self.invalid("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let data = ta.data()[start * m..(start + len) * m].to_vec();
        let t = Tensor::new(vec![len, m], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows { input: a.0, start }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.check(a)?;
        let (n, m) = self.matrix_dims("slice_cols", ta)?;
        if start + len > m {
            return Err(self.invalid("slice_cols", format!("cols {start}..{} of {m}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for row in ta.data().chunks(m) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols { input: a.0, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.invalid("concat_rows", "no inputs"));
        }
        let m = self.check(parts[0])?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.check(p)?;
            let (r, c) = self.matrix_dims("concat_rows", tp)?;
            if c != m {
                return Err(self.mismatch("concat_rows", &[r, m], tp.shape()));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, m], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.iter().map(|v| v.0).collect()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let mut s = 0.0;
        for &x in ta.data() {
            s += x;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a.0), rg))
    }

    /// Sums over the last dimension: `[n, m] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let (n, m) = self.matrix_dims("sum_cols", ta)?;
        let out = ta
            .data()
            .chunks(m.max(1))
            .map(|r| {
                let mut s = 0.0;
                for &x in r {
                    s += x;
                }
                s
            })
            .collect();
        let t = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SumCols(a.0), rg))
    }

    // ---- model ops --------------------------------------------------------

    /// Gathers rows of `table` (shape `[vocab, d]`).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.check(table)?;
        let (vocab, d) = self.matrix_dims("embedding", tt)?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(self.invalid("embedding", format!("index {i} >= vocabulary {vocab}")));
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D convolution of one `[C, H, W]` image with a square kernel.
    /// `weight` is `[O, C * k * k]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        if tx.shape().len() != 3 {
            return Err(self.invalid("conv2d", format!("input must be [C,H,W], got {:?}", tx.shape())));
        }
        if stride == 0 || kernel == 0 {
            return Err(self.invalid("conv2d", "kernel and stride must be positive"));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (o, q) = self.matrix_dims("conv2d", tw)?;
        if q != c * kernel * kernel {
            return Err(self.mismatch("conv2d", &[o, c * kernel * kernel], tw.shape()));
        }
        if tb.len() != o {
            return Err(self.mismatch("conv2d", &[o], tb.shape()));
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(self.invalid("conv2d", "input smaller than kernel"));
        }
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = im2col(tx.data(), &geom);
        let hw = out_h * out_w;
        let mut out = vec![0.0; o * hw];
        let wd = tw.data();
        for oc in 0..o {
            let orow = &mut out[oc * hw..(oc + 1) * hw];
            kernels::vecmat(&wd[oc * q..(oc + 1) * q], &cols, hw, orow);
            let b = tb.data()[oc];
            for v in orow.iter_mut() {
                *v += b;
            }
        }
        let t = Tensor::new(vec![o, out_h, out_w], out)?;
        let rg = self.rg(&[input, weight, bias]);
        let cols = if self.keep_state(&[input, weight, bias]) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            t,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, out_h, out_w]`.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.check(input)?;
        if tx.shape().len() != 3 || out_h == 0 || out_w == 0 {
            return Err(self.invalid("avg_pool", format!("bad pooling of {:?}", tx.shape())));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let src = tx.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += src[(ch * h + y) * w + x];
                        }
                    }
                    out[(ch * out_h + oy) * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::AvgPool { input: input.0 }, rg))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` projections.
    ///
    /// Rows `< prefix` attend to the whole prefix; row `i >= prefix` attends
    /// to rows `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, prefix: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (n, d) = self.matrix_dims("attention", tq)?;
        if tk.shape() != tq.shape() {
            return Err(self.mismatch("attention", tq.shape(), tk.shape()));
        }
        if tv.shape() != tq.shape() {
            return Err(self.mismatch("attention", tq.shape(), tv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(self.invalid("attention", format!("{d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keep = self.keep_state(&[q, k, v]);
        let mut probs = if keep { vec![0.0; heads * n * n] } else { Vec::new() };
        let mut scratch = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for i in 0..n {
            let end = kernels::visible_keys(i, prefix).min(n);
            for h in 0..heads {
                let off = h * dh;
                let p = if keep {
                    &mut probs[(h * n + i) * n..(h * n + i) * n + n]
                } else {
                    &mut scratch[..]
                };
                kernels::attend_row(
                    &qd[i * d + off..i * d + off + dh],
                    kd,
                    vd,
                    d,
                    off,
                    end,
                    scale,
                    p,
                    &mut out[i * d + off..i * d + off + dh],
                );
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                prefix,
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// variable that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(AutodiffError::NotRecording);
        }
        let lt = self.check(loss)?;
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if wants(*a) {
                    let ga = slot(grads, *a, n * k);
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            ga[i * k + kk] += kernels::dot(gi, tb.row(kk));
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * m);
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        let ai = ta.row(i);
                        for kk in 0..k {
                            let a_ik = ai[kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[kk * m..(kk + 1) * m].iter_mut().zip(gi) {
                                *o += a_ik * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if wants(i) {
                        axpy(slot(grads, i, g.len()), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if wants(*b) {
                    axpy(slot(grads, *b, g.len()), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / tb[i];
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * ta[i] / (tb[i] * tb[i]);
                    }
                }
            }
            Op::AddRow(a, b) => {
                let m = val(*b).len();
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, m);
                    for row in g.chunks(m) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let m = tb.len();
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i % m];
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, m);
                    for i in 0..g.len() {
                        gb[i % m] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), *c, g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
            }
            Op::Embedding { table, indices } => {
                if wants(*table) {
                    let tt = val(*table);
                    let d = tt.cols();
                    let gt = slot(grads, *table, tt.len());
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(&mut gt[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let tw = val(*weight);
                let (o, q) = (tw.shape()[0], tw.shape()[1]);
                let hw = geom.out_h * geom.out_w;
                if wants(*bias) {
                    let gb = slot(grads, *bias, o);
                    for oc in 0..o {
                        gb[oc] += g[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                    }
                }
                if wants(*weight) {
                    let gw = slot(grads, *weight, o * q);
                    for oc in 0..o {
                        let go = &g[oc * hw..(oc + 1) * hw];
                        for qq in 0..q {
                            gw[oc * q + qq] += kernels::dot(go, &cols[qq * hw..(qq + 1) * hw]);
                        }
                    }
                }
                if wants(*input) {
                    let wd = tw.data();
                    let mut dcols = vec![0.0; q * hw];
                    for oc in 0..o {
                        let go = &g[oc * hw..(oc + 1) * hw];
                        for qq in 0..q {
                            let wv = wd[oc * q + qq];
                            axpy(&mut dcols[qq * hw..(qq + 1) * hw], wv, go);
                        }
                    }
                    let gx = slot(grads, *input, geom.channels * geom.height * geom.width);
                    col2im(&dcols, geom, gx);
                }
            }
            Op::AvgPool { input } => {
                if wants(*input) {
                    let tx = val(*input);
                    let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (oh, ow) = (y.shape()[1], y.shape()[2]);
                    let gx = slot(grads, *input, tx.len());
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let share =
                                    g[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[(ch * h + yy) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let m = y.cols();
                    let ga = slot(grads, *a, g.len());
                    for ((yr, gr), out) in y.data().chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                        let s = kernels::dot(yr, gr);
                        for j in 0..m {
                            out[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv } => {
                if wants(*input) {
                    let m = y.cols();
                    let mf = m as f64;
                    let ga = slot(grads, *input, g.len());
                    for (r, ((yr, gr), out)) in y
                        .data()
                        .chunks(m)
                        .zip(g.chunks(m))
                        .zip(ga.chunks_mut(m))
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / mf;
                        let mean_gy = kernels::dot(gr, yr) / mf;
                        for j in 0..m {
                            out[j] += inv[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => self.unary_grad(*a, g, y.data(), grads, |x, _| kernels::gelu_grad(x)),
            Op::Erf(a) => self.unary_grad(*a, g, y.data(), grads, |x, _| {
                std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp()
            }),
            Op::Erfc(a) => self.unary_grad(*a, g, y.data(), grads, |x, _| {
                -std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp()
            }),
            Op::Softplus(a) => self.unary_grad(*a, g, y.data(), grads, |x, _| 1.0 / (1.0 + (-x).exp())),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                self.unary_grad(*a, g, y.data(), grads, move |x, _| if x > f { 1.0 } else { 0.0 })
            }
            Op::Log(a) => self.unary_grad(*a, g, y.data(), grads, |x, _| 1.0 / x),
            Op::Exp(a) => self.unary_grad(*a, g, y.data(), grads, |_, y| y),
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    let ga = slot(grads, *a, g.len());
                    for j in 0..m {
                        for i in 0..n {
                            ga[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::SliceRows { input, start } => {
                if wants(*input) {
                    let tx = val(*input);
                    let m = tx.cols();
                    let gx = slot(grads, *input, tx.len());
                    axpy(&mut gx[start * m..start * m + g.len()], 1.0, g);
                }
            }
            Op::SliceCols { input, start } => {
                if wants(*input) {
                    let tx = val(*input);
                    let m = tx.cols();
                    let len = y.cols();
                    let gx = slot(grads, *input, tx.len());
                    for (r, gr) in g.chunks(len).enumerate() {
                        axpy(&mut gx[r * m + start..r * m + start + len], 1.0, gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        axpy(slot(grads, p, len), 1.0, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                prefix,
                probs,
            } => self.attention_grad(*q, *k, *v, *heads, *prefix, probs, g, grads),
            Op::SumAll(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    let ga = slot(grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let ta = val(*a);
                    let m = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    for (r, row) in ga.chunks_mut(m).enumerate() {
                        for x in row {
                            *x += g[r];
                        }
                    }
                }
            }
        }
    }

    fn unary_grad(
        &self,
        a: usize,
        g: &[f64],
        y: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let x = self.nodes[a].value.data();
        let ga = slot(grads, a, g.len());
        for i in 0..g.len() {
            ga[i] += g[i] * dfdx(x[i], y[i]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_grad(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        prefix: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tq = &self.nodes[q].value;
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            tq.data(),
            self.nodes[k].value.data(),
            self.nodes[v].value.data(),
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let end = kernels::visible_keys(i, prefix).min(n);
                let p = &probs[(h * n + i) * n..(h * n + i) * n + end];
                let go = &g[i * d + off..i * d + off + dh];
                let mut s = 0.0;
                for j in 0..end {
                    let dp = kernels::dot(go, &vd[j * d + off..j * d + off + dh]);
                    ds[j] = dp;
                    s += p[j] * dp;
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..end {
                    let dsj = p[j] * (ds[j] - s) * scale;
                    axpy(&mut dv[j * d + off..j * d + off + dh], p[j], go);
                    if dsj != 0.0 {
                        axpy(&mut dq[i * d + off..i * d + off + dh], dsj, &kd[j * d + off..j * d + off + dh]);
                        axpy(&mut dk[j * d + off..j * d + off + dh], dsj, qi);
                    }
                }
            }
        }
        for (idx, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[idx].requires_grad {
                axpy(slot(grads, idx, n * d), 1.0, &buf);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn pool_bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    let start = i * size / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end.max(start + 1).min(size.max(1)))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.out_h * g.out_w;
    let k = g.kernel;
    let mut cols = vec![0.0; g.channels * k * k * hw];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * g.out_w + ox] = x[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let hw = g.out_h * g.out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        gx[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 7.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::inference();
        let x = tape.param(Tensor::scalar(1.0));
        assert_eq!(tape.backward(x).unwrap_err(), AutodiffError::NotRecording);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
        assert!(matches!(tape.backward(Var(99)), Err(AutodiffError::UnknownVar(99))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            AutodiffError::ShapeMismatch { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn causal_attention_first_row_copies_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.attention(q, q, v, 1, 0).unwrap();
        assert_eq!(tape.value(y).row(0), &[5.0, 6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = tape.constant(t(&[1, 9], &w));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, b, 3, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }
}
