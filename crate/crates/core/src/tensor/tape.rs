use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitive ops. Nodes are appended in execution
/// order, so reverse index order is a valid topological order for the adjoint
/// sweep. Leaf gradients persist across [`Tape::backward`] calls and
/// accumulate until [`Tape::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// (outer, axis length, inner) strides for reducing along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (xt, vt) = (self.value(x), self.value(v));
        if vt.len() != xt.cols() {
            return Err(dim_err(op, xt, vt));
        }
        let d = xt.cols();
        let vd = vt.data();
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vd[i % d]))
            .collect();
        Tensor::new(xt.shape().to_vec(), data)
    }

    /// `x + v` with `v` (length = last axis) expanded over leading axes.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, v, |a, b| a + b)?;
        Ok(self.derived(out, Op::AddRow(x, v), &[x, v]))
    }

    /// `x ⊙ v` with `v` expanded over leading axes.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, v, |a, b| a * b)?;
        Ok(self.derived(out, Op::MulRow(x, v), &[x, v]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|a| a * c);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|a| a + c);
        self.derived(out, Op::AddScalar(x), &[x])
    }

    /// Multiply every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("scale_by", self.value(x), self.value(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|a| a * c);
        Ok(self.derived(out, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.derived(out, Op::Exp(x), &[x])
    }

    /// Standardise over the last axis with biased variance, no affine.
    pub fn layer_norm_raw(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xt = self.value(x);
        let d = xt.cols();
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, &v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * rs;
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), xhat.clone())?;
        Ok(self.derived(out, Op::LayerNorm { x, xhat, rstd }, &[x]))
    }

    /// Layer norm with optional per-feature gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        eps: f64,
        gain: Option<Var>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let mut y = self.layer_norm_raw(x, eps)?;
        if let Some(g) = gain {
            y = self.mul_row(y, g)?;
        }
        if let Some(b) = bias {
            y = self.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} invalid for shape {:?}",
                xt.shape()
            )));
        }
        let (outer, len, inner) = axis_layout(xt.shape(), axis);
        let src = xt.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.derived(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        self.softmax(x, axis)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 || start + len > xt.cols() || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {:?}",
                start + len,
                xt.shape()
            )));
        }
        let (m, n) = (xt.shape()[0], xt.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xt.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let m = first.shape()[0];
        for &v in xs {
            let t = self.value(v);
            if t.rank() != 2 || t.shape()[0] != m {
                return Err(dim_err("concat_cols", first, t));
            }
        }
        let n: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let n = first.cols();
        for &v in xs {
            let t = self.value(v);
            if t.rank() != 2 || t.cols() != n {
                return Err(dim_err("concat_rows", first, t));
            }
        }
        let mut data = Vec::new();
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let m = data.len() / n;
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Rows of a rank-2 tensor picked by index (embedding lookup, reordering).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!("gather_rows on {:?}", xt.shape())));
        }
        let rows = xt.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * xt.cols());
        for &i in idx {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            data.extend_from_slice(xt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), xt.cols()], data)?;
        Ok(self.derived(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    /// Mean over rows of a rank-2 tensor, giving `1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!("mean_rows on {:?}", xt.shape())));
        }
        let (m, n) = (xt.shape()[0], xt.cols());
        let mut acc = vec![0.0; n];
        for r in 0..m {
            for (a, v) in acc.iter_mut().zip(xt.row(r)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= m as f64;
        }
        let out = Tensor::new(vec![1, n], acc)?;
        Ok(self.derived(out, Op::MeanRows(x), &[x]))
    }

    /// Scale every row to unit Euclidean norm (rows of zero norm stay zero).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        let mut norms = Vec::with_capacity(xt.rows());
        let mut data = xt.data().to_vec();
        for r in 0..xt.rows() {
            let nrm = xt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                for v in &mut data[r * d..(r + 1) * d] {
                    *v /= nrm;
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean over rows of `−log softmax(row)[target]`. A rank-1 `logits`
    /// tensor is one row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let k = lt.cols();
        let rows = lt.rows();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; lt.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index { index: t, len: k });
            }
            let row = lt.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[t];
        }
        let out = Tensor::scalar(loss / rows as f64);
        Ok(self.derived(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagate adjoints from the scalar `loss` and accumulate them into
    /// every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let btr = bt.transpose().expect("rank 2");
                    send(*a, &|s| matmul_into(g, btr.data(), s, m, n, k));
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    let atr = at.transpose().expect("rank 2");
                    send(*b, &|s| matmul_into(atr.data(), g, s, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                send(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bd[j];
                    }
                });
                send(*b, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * ad[j];
                    }
                });
            }
            Op::AddRow(x, v) => {
                send(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                send(*v, &|s| {
                    let d = s.len();
                    for (j, gv) in g.iter().enumerate() {
                        s[j % d] += gv;
                    }
                });
            }
            Op::MulRow(x, v) => {
                let (xd, vd) = (val(*x).data(), val(*v).data());
                let d = vd.len();
                send(*x, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * vd[j % d];
                    }
                });
                send(*v, &|s| {
                    for (j, gv) in g.iter().enumerate() {
                        s[j % d] += gv * xd[j];
                    }
                });
            }
            Op::Scale(x, c) => {
                send(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            Op::AddScalar(x) => {
                send(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::ScaleBy(x, sc) => {
                let c = val(*sc).item();
                let xd = val(*x).data();
                send(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
                send(*sc, &|s| {
                    s[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Exp(x) => {
                let od = out.data();
                send(*x, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * od[j];
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let d = out.cols();
                send(*x, &|s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[r * d + j] += rs * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let od = out.data();
                send(*x, &|s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + ii;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * od[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += od[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                send(*x, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * gelu_grad(xd[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                send(*x, &|s| {
                    for j in 0..s.len() {
                        if xd[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                // out is m×n, input n×m
                send(*x, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                send(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let (m, len) = (out.shape()[0], out.cols());
                send(*x, &|s| {
                    for r in 0..m {
                        for c in 0..len {
                            s[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let m = out.shape()[0];
                let mut off = 0;
                for &v in xs {
                    let w = val(v).cols();
                    send(v, &|s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = val(v).len();
                    send(v, &|s| {
                        s.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b)
                    });
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = out.cols();
                send(*x, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            s[src * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                send(*x, &|s| s.iter_mut().for_each(|a| *a += g0));
            }
            Op::MeanRows(x) => {
                let m = val(*x).shape()[0] as f64;
                let d = out.cols();
                send(*x, &|s| {
                    for (j, a) in s.iter_mut().enumerate() {
                        *a += g[j % d] / m;
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = out.cols();
                let od = out.data();
                send(*x, &|s| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &od[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                send(*logits, &|s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
