use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulChannel(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    Reshape(Var),
    Sum(Var),
    SumAxis { x: Var, outer: usize, n: usize, inner: usize, mean: bool },
    MaxAxis { x: Var, arg: Vec<usize> },
    Concat(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    WeightedGather { x: Var, idx: Vec<usize>, w: Vec<f64>, k: usize },
    BatchNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// tape backwards visits every node after all of its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Row-major matrix view with explicit strides, so transposes need no copy.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a `rows × cols` matrix.
    pub fn t(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_acc(n: usize, k: usize, m: usize, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    let span = |r: &MatRef<'_>, rows: usize, cols: usize| (rows - 1) * r.row_stride + (cols - 1) * r.col_stride;
    assert!(span(&a, n, k) < a.data.len() && span(&b, k, m) < b.data.len() && out.len() >= n * m);
    // SAFETY: the assert above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(n, k, m, MatRef::new(ta.data(), k), MatRef::new(tb.data(), m), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    fn per_channel(&mut self, x: Var, c: Var, op: &'static str, mul: bool) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.shape().len() != 1 || tc.shape()[0] != tx.cols() || tx.shape().is_empty() {
            return Err(mismatch(op, tx, tc));
        }
        let cols = tx.cols();
        let cv = tc.data();
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * cv[i % cols] } else { v + cv[i % cols] })
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(c);
        let op = if mul { Op::MulChannel(x, c) } else { Op::AddBias(x, c) };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.per_channel(x, b, "add_bias", false)
    }

    /// `x * g` with `g` broadcast along the last axis.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        self.per_channel(x, g, "mul_channel", true)
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, mul: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| if mul { x * y } else { x + y })
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", false)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", true)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same element count");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same element count");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    fn axis_split(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((outer, shape[axis], inner, out_shape))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let (outer, n, inner, out_shape) = self.axis_split(x, axis, "sum_axis")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        if mean && n > 0 {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::SumAxis { x, outer, n, inner, mean },
            rg,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, out_shape) = self.axis_split(x, axis, "max_axis")?;
        if n == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for t in 0..inner {
                    let v = src[base + t];
                    let slot = o * inner + t;
                    if j == 0 || v > out[slot] {
                        out[slot] = v;
                        arg[slot] = base + t;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, arg }, rg))
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(mismatch("concat", self.value(*first), t));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Row `i` of the output is `Σ_j w[i·k + j] · x[idx[i·k + j]]`.
    pub fn weighted_gather(&mut self, x: Var, idx: &[usize], w: &[f64], k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || k == 0 || idx.len() != w.len() || idx.len() % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "weighted_gather",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len(), w.len(), k],
            });
        }
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather index {bad} out of {rows} rows")));
        }
        let n = idx.len() / k;
        let mut out = vec![0.0; n * c];
        for (orow, (irow, wrow)) in out.chunks_mut(c.max(1)).zip(idx.chunks(k).zip(w.chunks(k))) {
            for (&i, &wt) in irow.iter().zip(wrow) {
                for (o, v) in orow.iter_mut().zip(t.row(i)) {
                    *o += wt * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::WeightedGather { x, idx: idx.to_vec(), w: w.to_vec(), k },
            rg,
        ))
    }

    /// Per-column standardization with batch statistics (no affine part).
    /// Returns the node plus the batch mean and (biased) variance.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.rows() == 0 {
            return Err(Error::invalid("batch norm expects a non-empty 2-D input"));
        }
        let (rows, c) = (t.rows(), t.cols());
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = t.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for ((v, m), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        let rg = self.rg(x);
        let out = Tensor::new(vec![rows, c], xhat.clone())?;
        Ok((self.push(out, Op::BatchNorm { x, xhat, inv_std }, rg), mean, var))
    }

    /// `x * scale + shift` with constant per-column coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if scale.len() != c || shift.len() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: t.shape().to_vec(),
                rhs: vec![scale.len(), shift.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % c] + shift[i % c])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelAffine { x, scale: scale.to_vec() }, rg))
    }

    /// Back-propagates from the scalar `loss`; previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if let Some(ga) = acc(grads, nodes, *a) {
                        // dA = dY · Bᵀ
                        gemm_acc(n, m, k, MatRef::new(&gy, m), MatRef::t(tb.data(), m), ga);
                    }
                    if let Some(gb) = acc(grads, nodes, *b) {
                        // dB = Aᵀ · dY
                        gemm_acc(k, n, m, MatRef::t(ta.data(), k), MatRef::new(&gy, m), gb);
                    }
                }
                Op::AddBias(x, b) => {
                    let c = node.value.cols();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(g, y)| *g += y);
                    }
                    if let Some(gb) = acc(grads, nodes, *b) {
                        for (i, y) in gy.iter().enumerate() {
                            gb[i % c] += y;
                        }
                    }
                }
                Op::MulChannel(x, s) => {
                    let c = node.value.cols();
                    let xv = nodes[x.0].value.data();
                    let sv = nodes[s.0].value.data();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (i, y) in gy.iter().enumerate() {
                            gx[i] += y * sv[i % c];
                        }
                    }
                    if let Some(gs) = acc(grads, nodes, *s) {
                        for (i, y) in gy.iter().enumerate() {
                            gs[i % c] += y * xv[i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(g) = acc(grads, nodes, v) {
                            g.iter_mut().zip(&gy).for_each(|(g, y)| *g += y);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = acc(grads, nodes, *a) {
                        for ((g, y), o) in ga.iter_mut().zip(&gy).zip(bv) {
                            *g += y * o;
                        }
                    }
                    if let Some(gb) = acc(grads, nodes, *b) {
                        for ((g, y), o) in gb.iter_mut().zip(&gy).zip(av) {
                            *g += y * o;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = acc(grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(g, y)| *g += y * s);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for ((g, y), v) in gx.iter_mut().zip(&gy).zip(xv) {
                            if *v > 0.0 {
                                *g += y;
                            }
                        }
                    }
                }
                Op::Log(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for ((g, y), v) in gx.iter_mut().zip(&gy).zip(xv) {
                            *g += y / v;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let c = node.value.cols().max(1);
                    let yv = node.value.data();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for ((grow, dy), y) in gx.chunks_mut(c).zip(gy.chunks(c)).zip(yv.chunks(c)) {
                            let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                grow[j] += y[j] * (dy[j] - dot);
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = acc(grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(g, y)| *g += y);
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = acc(grads, nodes, *x) {
                        gx.iter_mut().for_each(|g| *g += gy[0]);
                    }
                }
                Op::SumAxis { x, outer, n, inner, mean } => {
                    let f = if *mean { 1.0 / *n as f64 } else { 1.0 };
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for o in 0..*outer {
                            let src = &gy[o * inner..(o + 1) * inner];
                            for j in 0..*n {
                                let base = (o * n + j) * inner;
                                for (g, y) in gx[base..base + inner].iter_mut().zip(src) {
                                    *g += y * f;
                                }
                            }
                        }
                    }
                }
                Op::MaxAxis { x, arg } => {
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (y, &a) in gy.iter().zip(arg) {
                            gx[a] += y;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(gp) = acc(grads, nodes, *p) {
                            for (grow, yrow) in gp.chunks_mut(w.max(1)).zip(gy.chunks(total.max(1))) {
                                for (g, y) in grow.iter_mut().zip(&yrow[off..off + w]) {
                                    *g += y;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = node.value.cols();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (r, &src) in idx.iter().enumerate() {
                            for (g, y) in gx[src * c..(src + 1) * c].iter_mut().zip(&gy[r * c..(r + 1) * c]) {
                                *g += y;
                            }
                        }
                    }
                }
                Op::WeightedGather { x, idx, w, k } => {
                    let c = node.value.cols();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (r, (irow, wrow)) in idx.chunks(*k).zip(w.chunks(*k)).enumerate() {
                            let yrow = &gy[r * c..(r + 1) * c];
                            for (&src, &wt) in irow.iter().zip(wrow) {
                                for (g, y) in gx[src * c..(src + 1) * c].iter_mut().zip(yrow) {
                                    *g += wt * y;
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm { x, xhat, inv_std } => {
                    let c = inv_std.len();
                    let rows = (gy.len() / c) as f64;
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for (i, (y, xh)) in gy.iter().zip(xhat).enumerate() {
                        sum_dy[i % c] += y;
                        sum_dy_xhat[i % c] += y * xh;
                    }
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (i, g) in gx.iter_mut().enumerate() {
                            let j = i % c;
                            *g += inv_std[j] / rows * (rows * gy[i] - sum_dy[j] - xhat[i] * sum_dy_xhat[j]);
                        }
                    }
                }
                Op::ChannelAffine { x, scale } => {
                    let c = scale.len();
                    if let Some(gx) = acc(grads, nodes, *x) {
                        for (i, (g, y)) in gx.iter_mut().zip(&gy).enumerate() {
                            *g += y * scale[i % c];
                        }
                    }
                }
            }
            grads[i] = Some(gy);
        }
        Ok(())
    }
}
