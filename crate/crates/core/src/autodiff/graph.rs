//! Tape-based reverse-mode differentiation. Nodes are appended in creation
//! order, so reverse index order is a valid topological order.

use super::array::{gemm, shape_str, Array};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    L2Normalize { x: Var, axis: usize, eps: f64 },
    Mean(Var),
    Sum(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Scale(Var, f64),
    Offset(Var),
    Reshape(Var),
    BroadcastTo(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    SliceRows { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    visits: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{} vs {}", shape_str(a.shape()), shape_str(b.shape())),
        ));
    }
    Ok(())
}

fn axis_of(op: &'static str, a: &Array, axis: usize) -> Result<(usize, usize, usize)> {
    a.axis_layout(axis)
        .ok_or_else(|| Error::shape(op, format!("axis {axis} out of range for {}", shape_str(a.shape()))))
}

fn broadcast_index(out_idx: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let mut rem = out_idx;
    let mut in_idx = 0;
    let mut in_stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        if in_shape[d] != 1 {
            in_idx += coord * in_stride;
        }
        in_stride *= in_shape[d];
    }
    in_idx
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

    /// Number of nodes processed by the last `backward` call.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable leaf; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient after `backward`; `None` when the node is unreachable from the
    /// loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// Matrix product of two rank-2 arrays.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(va.shape()), shape_str(vb.shape())),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(va.data(), false, vb.data(), false, m, k, n, &mut out, false);
        let out = Array::new(vec![m, n], out)?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {}", shape_str(&base)),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} along axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Array::new(shape, data)?;
        Ok(self.derived(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = axis_of("softmax", v, axis)?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        Ok(self.derived(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.derived(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.derived(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(x), &[x])
    }

    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = axis_of("l2_normalize", v, axis)?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let norm = ((0..n).map(|j| src[at(j)] * src[at(j)]).sum::<f64>() + eps).sqrt();
                for j in 0..n {
                    out[at(j)] = src[at(j)] / norm;
                }
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        Ok(self.derived(out, Op::L2Normalize { x, axis, eps }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let out = Array::scalar(v.sum() / v.len() as f64);
        Ok(self.derived(out, Op::Mean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.derived(out, Op::Log(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.derived(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    /// `x + c` element-wise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.derived(out, Op::Offset(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = v
            .reshaped(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{} -> {}", shape_str(v.shape()), shape_str(shape))))?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Repeats size-1 dimensions of `x` to reach `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let ok = v.shape().len() == shape.len() && v.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::shape(
                "broadcast_to",
                format!("{} -> {}", shape_str(v.shape()), shape_str(shape)),
            ));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| v.data()[broadcast_index(i, shape, v.shape())]).collect();
        let out = Array::new(shape.to_vec(), data)?;
        Ok(self.derived(out, Op::BroadcastTo(x), &[x]))
    }

    /// Rows of a rank-2 table, in `indices` order (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(table);
        if v.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {}", shape_str(v.shape()))));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of range for {}", shape_str(v.shape())),
                ));
            }
            data.extend_from_slice(v.row(i));
        }
        let out = Array::new(vec![indices.len(), cols], data)?;
        Ok(self.derived(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..start + len` of a rank-2 array.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || start + len > v.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, shape_str(v.shape())),
            ));
        }
        let cols = v.shape()[1];
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let out = Array::new(vec![len, cols], data)?;
        Ok(self.derived(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// reachable node. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        self.backward_done = true;
        self.visits = 0;

        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss).to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.visits += 1;
            self.propagate(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Array| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |gi, bi| gi * bi));
                acc(*b, g.zip_map(va, |gi, ai| gi * ai));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), false, vb.data(), true, m, n, k, &mut da, false);
                    acc(*a, Array::new(vec![m, k], da).expect("matmul grad shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(va.data(), true, g.data(), false, k, m, n, &mut db, false);
                    acc(*b, Array::new(vec![k, n], db).expect("matmul grad shape"));
                }
            }
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let chunk = ps[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let s = o * row + offset;
                        d.extend_from_slice(&g.data()[s..s + chunk]);
                    }
                    offset += chunk;
                    acc(*p, Array::new(ps, d).expect("concat grad shape"));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = y.axis_layout(*axis).expect("validated axis");
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Array::new(y.shape().to_vec(), d).expect("softmax grad shape"));
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gi, s| gi * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gi, t| gi * (1.0 - t * t))),
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, g.zip_map(vx, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::L2Normalize { x, axis, eps } => {
                let vx = self.value(*x);
                let (outer, n, inner) = vx.axis_layout(*axis).expect("validated axis");
                let (xd, gd) = (vx.data(), g.data());
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let s2 = (0..n).map(|j| xd[at(j)] * xd[at(j)]).sum::<f64>() + eps;
                        let s = s2.sqrt();
                        let gx: f64 = (0..n).map(|j| gd[at(j)] * xd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = gd[at(j)] / s - xd[at(j)] * gx / (s2 * s);
                        }
                    }
                }
                acc(*x, Array::new(vx.shape().to_vec(), d).expect("l2 grad shape"));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                acc(*x, Array::full(vx.shape().to_vec(), g.item() / vx.len() as f64));
            }
            Op::Sum(x) => acc(*x, Array::full(self.shape(*x).to_vec(), g.item())),
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |gi, xi| gi / xi)),
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                acc(
                    *x,
                    g.zip_map(vx, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
                );
            }
            Op::Scale(x, c) => acc(*x, g.map(|gi| gi * c)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                acc(*x, g.reshaped(s).expect("reshape grad shape"));
            }
            Op::BroadcastTo(x) => {
                let in_shape = self.shape(*x).to_vec();
                let mut d = Array::zeros(in_shape.clone());
                for (i, gi) in g.data().iter().enumerate() {
                    d.data_mut()[broadcast_index(i, y.shape(), &in_shape)] += gi;
                }
                acc(*x, d);
            }
            Op::GatherRows { table, indices } => {
                let mut d = Array::zeros(self.shape(*table).to_vec());
                let cols = d.cols();
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * cols..(i + 1) * cols];
                    dst.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                acc(*table, d);
            }
            Op::SliceRows { x, start } => {
                let mut d = Array::zeros(self.shape(*x).to_vec());
                let cols = d.cols();
                let n = g.len();
                d.data_mut()[start * cols..start * cols + n].copy_from_slice(g.data());
                acc(*x, d);
            }
        }
    }
}
