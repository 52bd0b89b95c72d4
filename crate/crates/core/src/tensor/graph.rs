//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! creation order, which is always a valid topological order, so the
//! backward sweep simply walks the tape from the loss towards the leaves
//! and visits each node once.
//!
//! ```
//! use dpq_core::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(&Tensor::scalar(3.0).into_param());
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user supplied node: maps the output
/// gradient to one gradient buffer per input.
pub type Vjp = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, Var, Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: Vjp,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Primitive operations, for callers that want to dispatch on a kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Affine,
    Silu,
    Sum,
    Mean,
    Square,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast {
        rows: usize,
    },
    GatherRows(Vec<usize>),
}

/// Dynamic computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`; zeros when `v` is not reachable from the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
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

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// Registers a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether `v` participates in differentiation.
    pub fn tracks(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(
                    "apply",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                Ok(self.scale(inputs[0], *c))
            }
            Primitive::Affine => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Silu => {
                arity(1)?;
                Ok(self.silu(inputs[0]))
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            Primitive::Square => {
                arity(1)?;
                self.square(inputs[0])
            }
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], *axis, *start, *len)
            }
            Primitive::Broadcast { rows } => {
                arity(1)?;
                self.broadcast_rows(inputs[0], *rows)
            }
            Primitive::GatherRows(idx) => {
                arity(1)?;
                self.gather_rows(inputs[0], idx)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = mat_dims(ta);
        let (k2, m) = mat_dims(tb);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = mat_dims(tx);
        let (k2, m) = mat_dims(tw);
        if tx.shape().len() != 2 || tw.shape().len() != 2 || k != k2 || tb.len() != m {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut data = matmul_raw(tx.data(), tw.data(), n, k, m);
        for row in data.chunks_mut(m.max(1)) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Affine(x, w, b), rg))
    }

    /// SiLU activation `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Square(a), rg))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape(
                "concat",
                format!("{} parts, axis {axis}", parts.len()),
            ));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| mat_dims(self.value(p))).collect();
        let out = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::shape("concat", format!("column counts {dims:?}")));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::shape("concat", format!("row counts {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = mat_dims(t);
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!(
                    "[{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    t.shape()
                ),
            ));
        }
        let out = if axis == 0 {
            Tensor::matrix(
                len,
                cols,
                t.data()[start * cols..(start + len) * cols].to_vec(),
            )?
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::matrix(rows, len, data)?
        };
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::Slice {
                src,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    /// Repeats a single row (or vector / scalar) `rows` times.
    pub fn broadcast_rows(&mut self, src: Var, rows: usize) -> Result<Var> {
        let t = self.value(src);
        if t.rows() != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("source {:?} is not a row", t.shape()),
            ));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::Broadcast(src), rg))
    }

    /// Row lookup, `out[i] = src[idx[i]]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {:?}", t.shape()),
            ));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Appends a node whose value was computed outside the graph, with its
    /// vector-Jacobian product supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Vjp) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let lens = self.nodes.iter().map(|nd| nd.value.len()).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(buf) => {
                        for (b, c) in buf.iter_mut().zip(contrib) {
                            *b += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (nr, k) = mat_dims(ta);
                    let m = tb.cols();
                    if self.rg(*a) {
                        acc(*a, matmul_nt(&g, tb.data(), nr, k, m), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, matmul_tn(ta.data(), &g, nr, k, m), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.iter().map(|v| -v).collect(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| c * v).collect(), &mut grads),
                Op::Affine(x, w, b) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (nr, k) = mat_dims(tx);
                    let m = tw.cols();
                    if self.rg(*x) {
                        acc(*x, matmul_nt(&g, tw.data(), nr, k, m), &mut grads);
                    }
                    if self.rg(*w) {
                        acc(*w, matmul_tn(tx.data(), &g, nr, k, m), &mut grads);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; m];
                        for row in g.chunks(m.max(1)) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Silu(a) => {
                    let ta = self.value(*a);
                    let ga = g
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(*a, ga, &mut grads);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    acc(*a, vec![g[0]; len], &mut grads);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    acc(*a, vec![g[0] / len as f64; len], &mut grads);
                }
                Op::Square(a) => {
                    let ta = self.value(*a);
                    let ga = g
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, x)| 2.0 * x * gv)
                        .collect();
                    acc(*a, ga, &mut grads);
                }
                Op::Concat { parts, axis } => {
                    let out_cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = mat_dims(self.value(p));
                        let gp = if *axis == 0 {
                            let s = g[offset * out_cols..(offset + pr) * out_cols].to_vec();
                            offset += pr;
                            s
                        } else {
                            let mut s = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                s.extend_from_slice(
                                    &g[r * out_cols + offset..r * out_cols + offset + pc],
                                );
                            }
                            offset += pc;
                            s
                        };
                        acc(p, gp, &mut grads);
                    }
                }
                Op::Slice {
                    src,
                    axis,
                    start,
                    len,
                } => {
                    let (sr, sc) = mat_dims(self.value(*src));
                    let mut gs = vec![0.0; sr * sc];
                    if *axis == 0 {
                        gs[start * sc..(start + len) * sc].copy_from_slice(&g);
                    } else {
                        for r in 0..sr {
                            gs[r * sc + start..r * sc + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                    }
                    acc(*src, gs, &mut grads);
                }
                Op::Broadcast(src) => {
                    let cols = self.value(*src).len();
                    let mut gs = vec![0.0; cols];
                    for row in g.chunks(cols.max(1)) {
                        for (o, v) in gs.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*src, gs, &mut grads);
                }
                Op::GatherRows { src, idx } => {
                    let t = self.value(*src);
                    let c = t.cols();
                    let mut gs = vec![0.0; t.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gs[i * c + j] += g[r * c + j];
                        }
                    }
                    acc(*src, gs, &mut grads);
                }
                Op::Custom { inputs, vjp } => {
                    let gs = vjp(&g);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (&v, gv) in inputs.iter().zip(gs) {
                        acc(v, gv, &mut grads);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .into_param()
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut g = Graph::new();
        let a = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out).data(), a.data());
    }

    #[test]
    fn add_zero_and_silu_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, -2.0, 0.5]);
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.silu(zero);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).into_param());
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x), vec![6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let w = g.leaf(&p(&[2], &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.square(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(&p(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x) + sum(x), d/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(&p(&[1, 2], &[1.5, -0.5]));
        let xx = g.mul(x, x).unwrap();
        let s1 = g.sum(xx);
        let s2 = g.sum(x);
        let l = g.add(s1, s2).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x), vec![4.0, 0.0]);
    }

    #[test]
    fn concat_slice_broadcast_gather_roundtrip_grads() {
        let mut g = Graph::new();
        let a = g.leaf(&p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&p(&[1, 2], &[5.0, 6.0]));
        let bb = g.broadcast_rows(b, 2).unwrap();
        let c = g.concat(&[a, bb], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 5.0]);
        let r = g.gather_rows(a, &[1, 1, 0]).unwrap();
        let l1 = g.sum(s);
        let l2 = g.sum(r);
        let l = g.add(l1, l2).unwrap();
        let grads = g.backward(l).unwrap();
        // a: column 1 of each row via slice, rows gathered (1 twice, 0 once)
        assert_eq!(grads.wrt(a), vec![1.0, 2.0, 2.0, 3.0]);
        // b: column 0 of b via slice on both broadcast rows
        assert_eq!(grads.wrt(b), vec![2.0, 0.0]);
    }
}
